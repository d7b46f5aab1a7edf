"""scikit-learn style wrapper around network construction and training."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .network import NetworkConfig
from .training import TrainConfig, evaluate, load_state, save_state, train
from .validation import check_labels, check_sequences

__all__ = ["SequenceSegmenter"]


class SequenceSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel crop/weed segmentation of image sequences.

    ``fit`` takes frames ``[n, S, C, H, W]`` (or ``[n, S, H, W]``) ordered oldest
    first, and label masks ``[n, S, H, W]`` with 0 background, 1 crop, 2 weed
    and optionally 3 intra-row weed (trained as weed). ``predict`` returns the
    argmax mask of the last (current) frame of each sequence, or of every
    frame with ``frame_scope="all"``.
    """

    def __init__(self, sequential_module=True, spatial_context=True, preprocessing=True,
                 depth=2, stem_maps=16, block_layers=2, growth_rate=4, dropout=1 / 3,
                 epochs=20, batch_size=2, learning_rate=0.01, lr_milestones=(10, 25),
                 reference_epochs=200, class_weights=(1.0, 10.0, 10.0),
                 loss_frames="current", frame_scope="current", resolution_mm=4.0,
                 random_state=0, verbose=False):
        self.sequential_module = sequential_module
        self.spatial_context = spatial_context
        self.preprocessing = preprocessing
        self.depth = depth
        self.stem_maps = stem_maps
        self.block_layers = block_layers
        self.growth_rate = growth_rate
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_milestones = lr_milestones
        self.reference_epochs = reference_epochs
        self.class_weights = class_weights
        self.loss_frames = loss_frames
        self.frame_scope = frame_scope
        self.resolution_mm = resolution_mm
        self.random_state = random_state
        self.verbose = verbose

    def _train_config(self, X):
        _, s, c, h, w = X.shape
        net = NetworkConfig(
            sequence_length=s, in_channels=c, height=h, width=w, depth=self.depth,
            stem_maps=self.stem_maps, block_layers=self.block_layers,
            growth_rate=self.growth_rate, dropout=self.dropout,
            preprocessing=self.preprocessing, sequential_module=self.sequential_module,
            spatial_context=self.spatial_context,
        )
        seed = self.random_state if self.random_state is not None else 0
        return TrainConfig(
            network=net, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, lr_milestones=tuple(self.lr_milestones),
            reference_epochs=self.reference_epochs, class_weights=tuple(self.class_weights),
            seed=int(seed), loss_frames=self.loss_frames,
        )

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_labels(y, X, 4)
        config = self._train_config(X).validate()
        self.state_ = train(config, X, y, progress=self.verbose)
        self.network_ = self.state_.net
        self.classes_ = np.arange(config.network.n_classes)
        self.loss_trace_ = list(self.state_.loss_trace)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "network_")
        cfg = self.network_.config
        return check_sequences(X, cfg.sequence_length, cfg.in_channels)

    def _frame_indices(self, frame_scope):
        scope = frame_scope or self.frame_scope
        if scope not in ("current", "all"):
            raise ValueError("frame_scope must be 'current' or 'all'")
        s = self.network_.config.sequence_length
        return [s - 1] if scope == "current" else list(range(s))

    def predict_proba(self, X, frame_scope=None):
        """Class distributions ``[n, k, n_classes, H, W]``; they sum to one per pixel."""
        X = self._check_X(X)
        return self.network_.predict_proba(X, self._frame_indices(frame_scope))

    def predict(self, X, frame_scope=None):
        """Label masks ``[n, k, H, W]`` with k = 1 (current frame) or S."""
        return self.predict_proba(X, frame_scope).argmax(axis=2).astype(np.uint8)

    def report(self, X, y, frame_scope=None):
        """Object-wise report (per-class precision, recall, F1)."""
        X = self._check_X(X)
        y = check_labels(y, X, 4)
        return evaluate(self.network_, X, y, self.resolution_mm, frame_scope or self.frame_scope)

    def score(self, X, y):
        """Object-wise average F1."""
        return self.report(X, y).average_f1

    def save(self, path):
        check_is_fitted(self, "network_")
        save_state(path, self.state_)

    @classmethod
    def load(cls, path, **params):
        state = load_state(path)
        tc, nc = state.config, state.config.network
        est = cls(
            sequential_module=nc.sequential_module, spatial_context=nc.spatial_context,
            preprocessing=nc.preprocessing, depth=nc.depth, stem_maps=nc.stem_maps,
            block_layers=nc.block_layers, growth_rate=nc.growth_rate, dropout=nc.dropout,
            epochs=tc.epochs, batch_size=tc.batch_size, learning_rate=tc.learning_rate,
            lr_milestones=tuple(tc.lr_milestones), reference_epochs=tc.reference_epochs,
            class_weights=tuple(tc.class_weights), loss_frames=tc.loss_frames,
            random_state=tc.seed,
        )
        est.set_params(**params)
        est.state_ = state
        est.network_ = state.net
        est.classes_ = np.arange(nc.n_classes)
        est.loss_trace_ = list(state.loss_trace)
        return est
