"""scikit-learn compatible continual-learning classifier."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import importance as imp
from ._validation import check_images, check_labels
from .consolidation import consolidate, penalty_gradient, penalty_value
from .data import epoch_order
from .nn import SGD, Adam, Network, clip_global_norm

logger = logging.getLogger(__name__)

IMPORTANCE_METHODS = ("fisher", "mas", "si", "total_abs_signal")
PENALTIES = ("none", "original", "stabilized")


class ElasticWeightConsolidation(ClassifierMixin, BaseEstimator):
    """Neural-network classifier trained task by task with a consolidation penalty.

    Each call to :meth:`partial_fit` learns one task: the network is trained
    on it with the penalty anchored at the previous tasks, then the
    importance of every weight on this task is estimated, added to the running
    total, and the current weights become the new anchor. :meth:`fit` forgets
    everything and learns a single task.

    Parameters
    ----------
    network : {'dense', 'conv'}
        'dense' is an MLP over flattened 28x28 inputs with ``hidden_layer_sizes``;
        'conv' is the two-block convolutional net.
    importance : {'fisher', 'mas', 'si', 'total_abs_signal'}
    penalty : {'none', 'original', 'stabilized'}
    ewc_lambda : float
        Penalty strength.
    fisher_mode : {'label', 'argmax', 'sampled'}
        Output selection for Fisher importance.
    n_importance_samples : int or None
        Samples used for Fisher/MAS/total-signal importance (None = whole task).
    clip_norm : float or None
        Global-norm gradient clipping threshold.
    clip_scope : {'combined', 'task'}
        Clip the task+penalty gradient, or only the task gradient.
    reset_optimizer : bool
        Start each task with fresh Adam moments.
    random_state : int
        Seeds initialisation, minibatch order and Fisher sampling.
    """

    def __init__(
        self,
        network="dense",
        hidden_layer_sizes=(300, 150),
        importance="mas",
        penalty="original",
        ewc_lambda=1.0,
        epochs=6,
        batch_size=100,
        optimizer="adam",
        learning_rate=0.001,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        fisher_mode="label",
        n_importance_samples=None,
        si_damping=0.1,
        clip_norm=None,
        clip_scope="combined",
        reset_optimizer=True,
        n_classes=10,
        random_state=0,
        verbose=0,
    ):
        self.network = network
        self.hidden_layer_sizes = hidden_layer_sizes
        self.importance = importance
        self.penalty = penalty
        self.ewc_lambda = ewc_lambda
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.fisher_mode = fisher_mode
        self.n_importance_samples = n_importance_samples
        self.si_damping = si_damping
        self.clip_norm = clip_norm
        self.clip_scope = clip_scope
        self.reset_optimizer = reset_optimizer
        self.n_classes = n_classes
        self.random_state = random_state
        self.verbose = verbose

    # -- setup -------------------------------------------------------------

    def _validate_params(self):
        if self.importance not in IMPORTANCE_METHODS:
            raise ValueError(f"importance must be one of {IMPORTANCE_METHODS}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")
        if self.clip_scope not in ("combined", "task"):
            raise ValueError("clip_scope must be 'combined' or 'task'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def _build_network(self):
        if self.network == "dense":
            sizes = (784, *tuple(self.hidden_layer_sizes), self.n_classes)
            return Network.dense(sizes)
        if self.network == "conv":
            return Network.conv(self.n_classes)
        raise ValueError(f"network must be 'dense' or 'conv', got {self.network!r}")

    def _initialize(self):
        self._validate_params()
        init_seed, shuffle_seed, sample_seed = np.random.SeedSequence(
            self.random_state
        ).generate_state(3)
        self.network_ = self._build_network().seeded_init(int(init_seed))
        self._shuffle_seed = int(shuffle_seed)
        self._sample_rng = np.random.default_rng(int(sample_seed))
        if self.optimizer == "adam":
            self.optimizer_ = Adam(self.learning_rate, self.beta1, self.beta2, self.epsilon)
        else:
            self.optimizer_ = SGD(self.learning_rate)
        self.optimizer_.reset(self.network_.n_params)
        self.importance_ = None
        self.task_importances_ = []
        self.consolidated_ = None
        self.n_tasks_ = 0
        self.loss_curve_ = []
        self.classes_ = np.arange(self.n_classes)

    @property
    def method_name_(self):
        if self.importance == "fisher":
            return f"fisher_{self.fisher_mode}"
        return self.importance

    # -- training ----------------------------------------------------------

    def fit(self, X, y, input_transform=None):
        """Reset and learn a single task."""
        self._initialize()
        return self.partial_fit(X, y, input_transform=input_transform)

    def partial_fit(self, X, y, input_transform=None):
        """Learn one more task, then consolidate.

        ``input_transform`` is applied to every minibatch (e.g. a
        :class:`~consolidate.data.TaskSpec`) so the raw images are never
        copied as a whole.
        """
        if not hasattr(self, "network_"):
            self._initialize()
        net = self.network_
        X = check_images(X, net.input_shape)
        y = check_labels(y, len(X), self.n_classes)

        track_si = self.penalty != "none" and self.importance == "si"
        self._train_task(X, y, input_transform, track_si)

        if self.penalty != "none":
            task_map = self._task_importance(X, y, input_transform)
            self.task_importances_.append(task_map)
            self.importance_ = task_map if self.importance_ is None else imp.accumulate(self.importance_, task_map)
            self.consolidated_ = consolidate(
                net,
                self.importance_,
                self.ewc_lambda,
                self.learning_rate,
                self.penalty == "stabilized",
            )
        self.n_tasks_ += 1
        return self

    def _train_task(self, X, y, input_transform, track_si):
        net = self.network_
        opt = self.optimizer_
        if self.reset_optimizer:
            opt.reset(net.n_params)
        state = self.consolidated_
        si = None
        if track_si:
            si = imp.SIAccumulator(self.si_damping)
            si.begin_task(net)
            self._si = si
        n = len(X)
        pen = np.empty(net.n_params)
        shape = (-1,) + net.input_shape
        batch = 0
        for epoch in range(self.epochs):
            order = epoch_order(n, self._shuffle_seed + self.n_tasks_, epoch)
            total_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                xb = X[idx]
                if input_transform is not None:
                    xb = input_transform(xb)
                loss, grad = net.backward(xb.reshape(shape), y[idx], batch_index=batch)
                total_loss += loss * len(idx)
                task_grad = grad
                if self.clip_norm is not None and self.clip_scope == "task":
                    grad = clip_global_norm(grad, self.clip_norm)
                if state is not None:
                    penalty_gradient(state, net.params, out=pen)
                    grad = np.add(grad, pen, out=pen)
                if self.clip_norm is not None and self.clip_scope == "combined":
                    grad = clip_global_norm(grad, self.clip_norm)
                delta = opt.step(net, grad)
                if si is not None:
                    si.record_step(task_grad, delta)
                batch += 1
            self.loss_curve_.append(total_loss / max(n, 1))
            if self.verbose:
                logger.info("task %d epoch %d loss %.5f", self.n_tasks_, epoch, self.loss_curve_[-1])

    def _task_importance(self, X, y, input_transform):
        net = self.network_
        if self.importance == "si":
            return self._si.finish_task(net)
        return self.estimate_importance(X, y, self.importance, input_transform)

    def estimate_importance(self, X, y=None, method=None, input_transform=None):
        """Importance of the current weights on ``(X, y)`` without changing state."""
        check_is_fitted(self, "network_")
        method = self.importance if method is None else method
        net = self.network_
        n = self.n_importance_samples
        if method == "fisher":
            return imp.fisher_importance(net, X, y, self.fisher_mode, n, rng=self._sample_rng,
                                         transform=input_transform)
        if method == "mas":
            return imp.mas_importance(net, X, n, transform=input_transform)
        if method == "total_abs_signal":
            return imp.total_abs_signal_importance(net, X, n, transform=input_transform)
        if method == "magnitude":
            return np.abs(net.params)
        if method == "si":
            raise ValueError("SI importance is only available from training; fit with importance='si'")
        raise ValueError(f"unknown importance method {method!r}")

    def penalty_value(self):
        """Current value of the consolidation penalty (0 before the first anchor)."""
        check_is_fitted(self, "network_")
        if self.consolidated_ is None:
            return 0.0
        return penalty_value(self.consolidated_, self.network_.params)

    # -- inference ---------------------------------------------------------

    def _logits(self, X, input_transform=None, batch_size=1000):
        check_is_fitted(self, "network_")
        net = self.network_
        X = check_images(X, net.input_shape)
        out = []
        for start in range(0, len(X), batch_size):
            xb = X[start : start + batch_size]
            if input_transform is not None:
                xb = input_transform(xb)
            out.append(net.logits(xb.reshape((-1,) + net.input_shape)))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def decision_function(self, X, input_transform=None):
        return self._logits(X, input_transform)

    def predict_proba(self, X, input_transform=None):
        z = self._logits(X, input_transform)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, input_transform=None):
        return self._logits(X, input_transform).argmax(axis=1)

    def score(self, X, y, sample_weight=None, input_transform=None):
        y = check_labels(y, len(X), self.n_classes)
        pred = self.predict(X, input_transform)
        if sample_weight is None:
            return float(np.mean(pred == y))
        w = np.asarray(sample_weight, dtype=np.float64)
        return float(np.sum(w * (pred == y)) / np.sum(w))
