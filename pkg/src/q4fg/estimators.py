"""scikit-learn style wrappers around the quantizers, pruners and the
quantization-aware distillation trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distill import Dataset, KDConfig, TrainConfig, qat_train, train_float
from .model import ModelConfig, QuantStrategy, build_model, forward
from .quant import activation_scheme, fake_quantize_array, quantize, weight_scheme
from .sparsity import l1_mask


class GroupWeightQuantizer(TransformerMixin, BaseEstimator):
    """Fit group-wise scales on a weight matrix, then round matrices onto that grid.

    ``groups=None`` gives one group per row.
    """

    def __init__(self, bits=4, symmetric=True, groups=None):
        self.bits = bits
        self.symmetric = symmetric
        self.groups = groups

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.scheme_ = weight_scheme(self.bits, self.symmetric, self.groups)
        self.qtensor_ = quantize(X, self.scheme_, kind="weight")
        self.scales_ = self.qtensor_.element_scales().astype(np.float64)
        self.zeros_ = self.qtensor_.element_zeros().astype(np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "qtensor_")
        X = check_array(X, dtype=np.float64)
        if X.shape != self.qtensor_.shape:
            raise ValueError(f"fitted on shape {self.qtensor_.shape}, got {X.shape}")
        return X

    def encode(self, X):
        """Integer codes of ``X`` under the fitted scales."""
        X = self._check(X)
        lo, hi = self.scheme_.int_range
        return np.rint(np.clip((X - self.zeros_) / self.scales_, lo, hi)).astype(np.int64)

    def transform(self, X):
        return self.encode(X) * self.scales_ + self.zeros_


class TokenwiseActivationQuantizer(TransformerMixin, BaseEstimator):
    """Dynamic per-row (per-token) fake quantization; fitting only records the width."""

    def __init__(self, bits=4, symmetric=True, clip=None):
        self.bits = bits
        self.symmetric = symmetric
        self.clip = clip

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.scheme_ = activation_scheme(self.bits, self.symmetric, self.clip)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scheme_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return fake_quantize_array(X, self.scheme_, kind="activation")[0]


class MagnitudePruner(TransformerMixin, BaseEstimator):
    """Learn a magnitude mask on a weight matrix; transform zeroes the pruned entries.

    ``structure`` is ``"unstructured"`` or ``"N:M"`` (N zeros in every M
    consecutive entries of a row).
    """

    def __init__(self, sparsity=0.5, structure="unstructured"):
        self.sparsity = sparsity
        self.structure = structure

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mask_ = l1_mask(X, self.sparsity, self.structure)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        X = check_array(X, dtype=np.float64)
        if X.shape != self.mask_.shape:
            raise ValueError(f"fitted on shape {self.mask_.shape}, got {X.shape}")
        return X * self.mask_.mask


class QATDistiller(ClassifierMixin, BaseEstimator):
    """Sequence classifier: trains a float teacher, then distills a quantized student.

    ``X`` holds integer token ids ``[n_samples, seq_len]``.  ``predict`` uses
    the quantized student.
    """

    def __init__(self, hidden=32, heads=4, layers=1, ln_placement="pre", bits=4, act_bits=4,
                 teacher_steps=1000, student_steps=1000, lr=3e-3, student_lr=1e-3, batch_size=32,
                 w_logit=1.0, w_att=1.0, w_rep=1.0, eval_every=250, seed=0):
        self.hidden = hidden
        self.heads = heads
        self.layers = layers
        self.ln_placement = ln_placement
        self.bits = bits
        self.act_bits = act_bits
        self.teacher_steps = teacher_steps
        self.student_steps = student_steps
        self.lr = lr
        self.student_lr = student_lr
        self.batch_size = batch_size
        self.w_logit = w_logit
        self.w_att = w_att
        self.w_rep = w_rep
        self.eval_every = eval_every
        self.seed = seed

    def _tokens(self, X):
        X = check_array(X, dtype=np.int64)
        if X.min() < 0:
            raise ValueError("token ids must be non-negative")
        return X

    def fit(self, X, y):
        X = self._tokens(X)
        self.classes_, yi = np.unique(np.asarray(y), return_inverse=True)
        vocab = int(X.max()) + 1
        self.n_features_in_ = X.shape[1]
        cfg = ModelConfig("encoder_only", self.layers, 0, self.hidden, self.heads, ln_placement=self.ln_placement,
                          vocab_size=vocab, max_seq=X.shape[1], num_labels=len(self.classes_))
        data = Dataset("majority_classification", vocab, X, X, yi, yi)
        self.teacher_ = build_model(cfg, seed=self.seed)
        t = train_float(self.teacher_, data, TrainConfig(lr=self.lr, max_steps=self.teacher_steps,
                                                          batch_size=self.batch_size, eval_every=self.eval_every,
                                                          seed=self.seed))
        self.teacher_.load_state_dict(t.best_state)
        self.strategy_ = QuantStrategy(weight_scheme=weight_scheme(self.bits),
                                       activation_scheme=activation_scheme(self.act_bits))
        self.student_ = self.teacher_.copy()
        kd = KDConfig(w_logit=self.w_logit, w_att=self.w_att, w_rep=self.w_rep)
        s = qat_train(self.student_, self.teacher_, data,
                      TrainConfig(lr=self.student_lr, max_steps=self.student_steps, batch_size=self.batch_size,
                                  eval_every=self.eval_every, seed=self.seed), kd, self.strategy_)
        self.student_.load_state_dict(s.best_state)
        self.log_ = s.log
        return self

    def decision_function(self, X):
        check_is_fitted(self, "student_")
        X = self._tokens(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected sequences of {self.n_features_in_} tokens, got {X.shape[1]}")
        if X.max() >= self.student_.cfg.vocab_size:
            raise ValueError("token id outside the fitted vocabulary")
        return forward(self.student_, X, self.strategy_).logits.data.astype(np.float64)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "student_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]
