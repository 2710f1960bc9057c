"""scikit-learn style wrappers around preprocessing and the classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentConfig, eval_window
from .ingest import PreprocessConfig, compute_valid_mask, preprocess
from .metrics import ScoreWeights, challenge_score, threshold
from .network import LEAD_PRESETS, MDARsn, ModelConfig
from .split import default_class_list
from .train import EcgDataset, TrainConfig, predict_logits, train_loop
from .validation import check_label_matrix, check_lead_mask, check_signal_batch


class EcgPreprocessor(TransformerMixin, BaseEstimator):
    """Resample, band-pass and normalise raw records into a fixed-length batch.

    ``transform`` takes a list of :class:`~mdarsn.ingest.EcgRecord` and returns
    a ``(n_records, n_leads, window_seconds * target_fs)`` float32 array
    holding the first window of each record. Stateless; ``fit`` only checks
    the parameters.
    """

    def __init__(self, target_fs=500.0, band_low=3.0, band_high=45.0, fir_taps=1001,
                 window_seconds=15.0):
        self.target_fs = target_fs
        self.band_low = band_low
        self.band_high = band_high
        self.fir_taps = fir_taps
        self.window_seconds = window_seconds

    def _config(self):
        return PreprocessConfig(self.target_fs, self.band_low, self.band_high, self.fir_taps)

    def fit(self, records=None, y=None):
        self._config()
        self.is_fitted_ = True
        return self

    def transform(self, records):
        cfg = self._config()
        rows = []
        for rec in records:
            out, _ = preprocess(rec, cfg)
            rows.append(eval_window(out.signal, cfg.target_fs, self.window_seconds))
        leads = {r.shape[0] for r in rows}
        if len(leads) > 1:
            raise ValueError(f"records have differing lead counts: {sorted(leads)}")
        return np.stack(rows).astype(np.float32)

    @staticmethod
    def valid_masks(records) -> np.ndarray:
        """``(n_records, n_leads)`` lead masks from the raw (NaN-bearing) signals."""
        return np.stack([compute_valid_mask(r.signal) for r in records])


class MDARsnClassifier(ClassifierMixin, BaseEstimator):
    """Multilabel ECG classifier (grouped SE-ResNet, MixStyle, lead attention).

    ``X`` is a preprocessed ``(n_records, n_leads, n_samples)`` batch at
    ``fs`` Hz and ``Y`` a ``(n_records, n_classes)`` indicator matrix.
    Architecture settings left at ``None`` take the per-lead-count preset.

    Args:
        n_leads: Number of input leads; selects the preset.
        d_model: Lead token width.
        n_resblocks: Residual blocks in the backbone.
        n_mix: Leading blocks followed by MixStyle; 0 disables it.
        resb_kernel: Residual block kernel size.
        first_conv_channels: Nominal stem width.
        head: ``"mha"`` (lead attention) or ``"pool"`` (masked mean + linear).
        window_seconds: Model input window.
        fs: Sampling rate of ``X``.
        learning_rate: Peak learning rate.
        dropout: Dropout before the classifier.
        batch_size: Minibatch size.
        warmup_steps: Linear warmup length in optimizer steps.
        max_steps: Total optimizer steps.
        patience_epochs: Early-stopping patience on validation average precision.
        min_window_fraction: Lower bound of the random crop fraction.
        lead_dropout_prob: Per-lead dropout probability during training.
        threshold: Probability cut-off used by ``predict``.
        classes: Class codes, one per column of ``Y``; defaults to the scored list.
        random_state: Seed for initialisation, batching and augmentation.
    """

    def __init__(self, n_leads=12, d_model=None, n_resblocks=8, n_mix=None, resb_kernel=None,
                 first_conv_channels=128, head="mha", window_seconds=15.0, fs=500.0,
                 learning_rate=1e-3, dropout=0.2, batch_size=96, warmup_steps=1000,
                 max_steps=10000, patience_epochs=5, min_window_fraction=0.5,
                 lead_dropout_prob=0.1, threshold=0.5, classes=None, random_state=0):
        self.n_leads = n_leads
        self.d_model = d_model
        self.n_resblocks = n_resblocks
        self.n_mix = n_mix
        self.resb_kernel = resb_kernel
        self.first_conv_channels = first_conv_channels
        self.head = head
        self.window_seconds = window_seconds
        self.fs = fs
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.patience_epochs = patience_epochs
        self.min_window_fraction = min_window_fraction
        self.lead_dropout_prob = lead_dropout_prob
        self.threshold = threshold
        self.classes = classes
        self.random_state = random_state

    def _model_config(self, d_class):
        preset = LEAD_PRESETS.get(self.n_leads, LEAD_PRESETS[12])
        return ModelConfig(
            n_leads=self.n_leads,
            d_class=d_class,
            heads=d_class,
            d_model=self.d_model if self.d_model is not None else preset["d_model"],
            n_resblocks=self.n_resblocks,
            n_mix=self.n_mix if self.n_mix is not None else preset["n_mix"],
            resb_kernel=self.resb_kernel if self.resb_kernel is not None else preset["resb_kernel"],
            first_conv_channels=self.first_conv_channels,
            head=self.head,
            window_seconds=self.window_seconds,
            fs=self.fs,
            dropout=self.dropout,
            seed=self.random_state,
        )

    def _dataset(self, X, Y, mask):
        return EcgDataset(list(X), mask, Y)

    def fit(self, X, Y, mask=None, eval_set=None):
        """Train; ``eval_set=(X_val, Y_val[, mask_val])`` drives early stopping.

        Without ``eval_set`` the training data doubles as the validation set.
        """
        X = check_signal_batch(X, self.n_leads)
        Y = check_label_matrix(Y, X.shape[0])
        mask = check_lead_mask(mask, X.shape[0], self.n_leads)
        classes = list(self.classes) if self.classes is not None else None
        if classes is None:
            default = default_class_list()
            classes = default if Y.shape[1] == len(default) else [str(i) for i in range(Y.shape[1])]
        if len(classes) != Y.shape[1]:
            raise ValueError(f"{len(classes)} classes given for {Y.shape[1]} label columns")
        model_cfg = self._model_config(Y.shape[1])
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate, dropout=self.dropout, batch_size=self.batch_size,
            warmup_steps=self.warmup_steps, max_steps=self.max_steps,
            patience_epochs=self.patience_epochs, seed=self.random_state, threshold=self.threshold,
        )
        aug = AugmentConfig(window_seconds=self.window_seconds,
                            min_window_fraction=self.min_window_fraction,
                            lead_dropout_prob=self.lead_dropout_prob, seed=self.random_state)
        train = self._dataset(X, Y, mask)
        if eval_set is None:
            val = train
        else:
            Xv, Yv = eval_set[0], eval_set[1]
            Xv = check_signal_batch(Xv, self.n_leads)
            Yv = check_label_matrix(Yv, Xv.shape[0], Y.shape[1])
            mv = check_lead_mask(eval_set[2] if len(eval_set) > 2 else None, Xv.shape[0], self.n_leads)
            val = self._dataset(Xv, Yv, mv)
        self.classes_ = np.asarray(classes)
        self.weights_ = ScoreWeights.identity(classes)
        self.model_ = MDARsn(model_cfg)
        self.result_ = train_loop(self.model_, train, val, train_cfg, aug, self.weights_)
        self.history_ = self.result_.history
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X, mask=None):
        check_is_fitted(self, "model_")
        X = check_signal_batch(X, self.n_leads)
        mask = check_lead_mask(mask, X.shape[0], self.n_leads)
        data = EcgDataset(list(X), mask, np.zeros((X.shape[0], len(self.classes_)), dtype=bool))
        return predict_logits(self.model_, data)

    def predict_proba(self, X, mask=None):
        return 1.0 / (1.0 + np.exp(-self.decision_function(X, mask)))

    def predict(self, X, mask=None):
        return threshold(self.predict_proba(X, mask), self.threshold).astype(int)

    def score(self, X, Y, mask=None, sample_weight=None):
        """Challenge score with identity rewards (exact-match credit only)."""
        Y = check_label_matrix(Y, np.shape(X)[0], len(self.classes_))
        return challenge_score(Y, self.predict(X, mask).astype(bool), self.weights_)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.input_tags.three_d_array = True
        return tags
