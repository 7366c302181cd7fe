"""scikit-learn style wrapper around the decomposition network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import Dataset, LabeledExample, split_train_val
from .exceptions import InvalidInputError
from .model import Model, ModelConfig, build_variant
from .signal import Signal, TimeGrid
from .trainer import History, TrainConfig, evaluate_predictions, train


class IRCNNDecomposer(TransformerMixin, BaseEstimator):
    """Learned decomposition of equal-length signals into IMFs and a residue.

    Parameters
    ----------
    variant : {"ircnn", "ircnn_tvd", "ircnn_att", "ircnn_plus"}, default="ircnn_plus"
        Architecture preset. ``ircnn_plus`` enables multi-scale attention
        blocks and the total-variation denoiser.
    n_components : int, default=2
        Number of IMFs ``M``. ``fit`` checks it against the labels.
    S : int, default=3
        Inner iterations per stage.
    K : int, default=32
        Base convolution kernel length.
    tvd_lambda : float, default=0.2
    epochs, batch_size, lr, early_stop_patience, eta_qtv
        Forwarded to :class:`~modedec.trainer.TrainConfig`.
    random_state : int, default=0
        Seeds weight initialization, the train/validation split and batch
        order.

    Attributes
    ----------
    model_ : Model
        The trained network (best validation epoch).
    history_ : History
    n_features_in_ : int
        Signal length seen during ``fit``.

    Examples
    --------
    >>> import numpy as np
    >>> from modedec.estimator import IRCNNDecomposer
    >>> t = np.linspace(0, 6, 128)
    >>> X = np.stack([np.cos(k * np.pi * t) + np.cos((k + 1.5) * np.pi * t) for k in range(5, 11)])
    >>> Y = np.stack([[np.cos((k + 1.5) * np.pi * t), np.cos(k * np.pi * t)] for k in range(5, 11)])
    >>> est = IRCNNDecomposer(K=8, epochs=1, batch_size=2).fit(X, Y)
    >>> est.transform(X).shape
    (6, 3, 128)
    """

    def __init__(self, variant="ircnn_plus", n_components=2, S=3, K=32, tvd_lambda=0.2,
                 epochs=200, batch_size=32, lr=1e-3, early_stop_patience=20, eta_qtv=0.0,
                 random_state=0):
        self.variant = variant
        self.n_components = n_components
        self.S = S
        self.K = K
        self.tvd_lambda = tvd_lambda
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.eta_qtv = eta_qtv
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        base = ModelConfig(M=self.n_components, S=self.S, K=self.K, tvd_lambda=self.tvd_lambda)
        return build_variant(self.variant, base)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           early_stop_patience=self.early_stop_patience,
                           seed=self.random_state, eta_qtv=self.eta_qtv)

    def fit(self, X, Y):
        """Train on signals ``X`` of shape (n, N) with labels ``Y`` of shape (n, M, N)."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=5, ensure_min_features=3)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 2:
            Y = Y[:, None, :]
        if Y.ndim != 3 or Y.shape[0] != X.shape[0] or Y.shape[2] != X.shape[1]:
            raise InvalidInputError(
                f"Y must have shape (n_samples, n_components, n_times) = "
                f"({X.shape[0]}, M, {X.shape[1]}), got {Y.shape}")
        if Y.shape[1] != self.n_components:
            raise InvalidInputError(
                f"Y has {Y.shape[1]} components but n_components={self.n_components}")
        if not np.all(np.isfinite(Y)):
            raise InvalidInputError("Y contains non-finite values")
        model_cfg = self._model_config()
        train_cfg = self._train_config()

        grid = TimeGrid(0.0, 1.0, X.shape[1])  # the network never looks at time stamps
        examples = [LabeledExample(Signal(grid, x), y) for x, y in zip(X, Y)]
        dataset = split_train_val(Dataset(examples), seed=self.random_state)
        self.model_ = Model(model_cfg, seed=self.random_state)
        self.model_, self.history_ = train(self.model_, dataset, train_cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64, ensure_min_features=3)
        if X.shape[1] < self.model_.config.K:
            raise InvalidInputError(
                f"signals of length {X.shape[1]} are shorter than K={self.model_.config.K}")
        return X

    def transform(self, X):
        """Decompose every row; returns shape (n, M + 1, N) with the residue last."""
        X = self._check_X(X)
        return np.stack([self.model_.decompose(x).as_array() for x in X])

    def predict(self, X):
        """IMFs only, shape (n, M, N)."""
        return self.transform(X)[:, :-1, :]

    def score(self, X, Y):
        """Negative mean absolute error of the IMFs (higher is better)."""
        pred = self.predict(X)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 2:
            Y = Y[:, None, :]
        report = evaluate_predictions(list(pred), list(Y))
        return -report.component_mean["mae"]

    @classmethod
    def from_model(cls, model: Model, **params) -> "IRCNNDecomposer":
        """Wrap an already trained :class:`Model` (e.g. loaded from a checkpoint)."""
        from .model import variant_name

        cfg = model.config
        est = cls(variant=variant_name(cfg), n_components=cfg.M, S=cfg.S, K=cfg.K,
                  tvd_lambda=cfg.tvd_lambda, **params)
        est.model_ = model
        est.history_ = History()
        return est
