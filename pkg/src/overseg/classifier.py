"""Training-set synthesis and a small numpy MLP for oversegmentation vs natural gap."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    LINEAR, QUADRATIC, FeatureConfig, build_feature_vector, feature_length,
    normalize_shape_index, screen_candidates, shape_columns,
)
from .features import CandidatePair
from .testkit import inject_gaps
from .volume import LabelVolume, build_cell_index

log = logging.getLogger(__name__)

MODEL_FORMAT = "overseg-mlp"
MODEL_VERSION = 1

OVERSEGMENTED = 1
NATURAL_GAP = 0


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class TrainingExample:
    features: np.ndarray
    label: int
    provenance: dict = field(default_factory=dict)


@dataclass
class SynthesisConfig:
    n_true: int = 20
    min_height: int = 4
    # screened pairs of the injected volume that are not the injected pair
    injected_negatives: bool = True
    features: FeatureConfig = field(default_factory=FeatureConfig)


@dataclass
class Hyperparams:
    hidden: tuple[int, ...] = (128, 64, 32)
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    val_fraction: float = 0.1
    patience: int = 10
    dropout: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weighting: bool = False
    threshold: float = 0.5


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    zero_variance: list[int] = field(default_factory=list)
    shape_normalizers: dict = field(default_factory=lambda: {LINEAR: (0.0, 1.0), QUADRATIC: (0.0, 1.0)})
    threshold: float = 0.5
    variant: str | None = "default"  # None: plain numeric inputs, no shape column
    seed: int = 0
    dropout: float = 0.3
    report: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        sizes = list(self.layer_sizes)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ModelFormatError("layer count does not match layer sizes")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ModelFormatError(f"layer {k}: weight shape {W.shape}, bias {b.shape} "
                                       f"vs sizes {sizes[k]}->{sizes[k + 1]}")
        if self.scaler_mean.shape != (sizes[0],) or self.scaler_std.shape != (sizes[0],):
            raise ModelFormatError("scaler does not match input size")
        if np.any(self.scaler_std <= 0):
            raise ModelFormatError("scaler stddev must be positive")

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def preprocess(self, X: np.ndarray) -> np.ndarray:
        """Per-class shape-index normalisation, then standardisation."""
        X = np.array(X, dtype=np.float64, ndmin=2)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        X = normalize_shape_column(X, self.variant, self.shape_normalizers)
        return (X - self.scaler_mean) / self.scaler_std


def normalize_shape_column(X: np.ndarray, variant: str | None, normalizers: dict) -> np.ndarray:
    if variant is None:
        return X
    s, lin, _ = shape_columns(variant)
    X = X.copy()
    for r in range(len(X)):
        cls = LINEAR if X[r, lin] >= 0.5 else QUADRATIC
        X[r, s] = normalize_shape_index(X[r, s], normalizers[cls])
    return X


def fit_shape_normalizers(X: np.ndarray, variant: str | None) -> dict:
    if variant is None:
        return {LINEAR: (0.0, 1.0), QUADRATIC: (0.0, 1.0)}
    s, lin, _ = shape_columns(variant)
    out = {}
    for cls, sel in ((LINEAR, X[:, lin] >= 0.5), (QUADRATIC, X[:, lin] < 0.5)):
        vals = X[sel, s]
        out[cls] = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# network math


def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def forward(model: MlpModel, X: np.ndarray, masks=None):
    """Return (output logits, cached activations). ``masks`` are inverted-dropout multipliers."""
    acts = [X]
    h = X
    n_layers = len(model.weights)
    for k in range(n_layers):
        z = h @ model.weights[k] + model.biases[k]
        if k < n_layers - 1:
            h = np.maximum(z, 0.0)
            if masks is not None:
                h = h * masks[k]
            acts.append(h)
        else:
            return z[:, 0], acts
    raise AssertionError("unreachable")


def bce_from_logits(logits, y, w=None):
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    per = np.logaddexp(0.0, -np.abs(logits)) + np.maximum(logits, 0.0) - logits * y
    if w is None:
        return float(per.mean())
    return float((per * w).sum() / w.sum())


def loss_and_grads(model: MlpModel, X, y, masks=None, sample_weight=None):
    """Binary cross-entropy and its gradients w.r.t. every weight and bias."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    logits, acts = forward(model, X, masks)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, np.float64)
    loss = bce_from_logits(logits, y, w)
    delta = ((sigmoid(logits) - y) * w / w.sum())[:, None]
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gW[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = delta @ model.weights[k].T
            if masks is not None:
                delta = delta * masks[k - 1]
            delta = delta * (acts[k] > 0)
    return loss, gW, gb


def predict_proba(model: MlpModel, X) -> np.ndarray:
    logits, _ = forward(model, model.preprocess(X))
    return sigmoid(logits)


def predict(model: MlpModel, features) -> tuple[float, bool]:
    """Single-vector prediction: (probability, probability >= threshold)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("predict takes one feature vector; use predict_proba for batches")
    p = float(predict_proba(model, f[None, :])[0])
    return p, p >= model.threshold


# ---------------------------------------------------------------------------
# training


def init_model(sizes, rng: np.random.Generator, **kw) -> MlpModel:
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        scale = np.sqrt(2.0 / sizes[k]) if k < len(sizes) - 2 else np.sqrt(1.0 / sizes[k])
        weights.append(rng.normal(0.0, scale, size=(sizes[k], sizes[k + 1])))
        biases.append(np.zeros(sizes[k + 1]))
    n = sizes[0]
    return MlpModel(list(sizes), weights, biases, np.zeros(n), np.ones(n), **kw)


def _as_arrays(examples):
    X = np.array([e.features for e in examples], dtype=np.float64)
    y = np.array([e.label for e in examples], dtype=np.float64)
    return X, y


def train(examples, hyperparams: Hyperparams | None = None, seed: int = 0,
          variant: str | None = "default", full_batch: bool = False) -> MlpModel:
    """Adam on binary cross-entropy with early stopping on a held-out split.

    Deterministic for a given seed: one generator drives initialisation,
    the split, shuffling and dropout. The per-epoch history lands in
    ``model.report``.
    """
    hp = hyperparams or Hyperparams()
    if isinstance(examples, tuple):
        X, y = (np.asarray(a, dtype=np.float64) for a in examples)
    else:
        X, y = _as_arrays(examples)
    if len(X) < 2:
        raise TrainingError("need at least two examples")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise TrainingError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data contains a single class")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite features")
    if variant is not None and X.shape[1] != feature_length(variant):
        raise TrainingError(f"variant {variant!r} expects {feature_length(variant)} features, got {X.shape[1]}")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(X))
    n_val = int(round(hp.val_fraction * len(X))) if hp.val_fraction > 0 else 0
    n_val = min(n_val, len(X) - 1)
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    Xtr, ytr = X[tr_idx], y[tr_idx]
    Xva, yva = X[val_idx], y[val_idx]
    if len(np.unique(ytr)) < 2:
        raise TrainingError("training split contains a single class")

    normalizers = fit_shape_normalizers(Xtr, variant)
    Xtr_n = normalize_shape_column(Xtr, variant, normalizers)
    mean = Xtr_n.mean(axis=0)
    std = Xtr_n.std(axis=0)
    zero_var = [int(i) for i in np.flatnonzero(std <= 1e-12)]
    std[std <= 1e-12] = 1.0

    sizes = [X.shape[1], *hp.hidden, 1]
    model = init_model(sizes, rng, zero_variance=zero_var, shape_normalizers=normalizers,
                       threshold=hp.threshold, variant=variant, seed=seed, dropout=hp.dropout)
    model.scaler_mean = mean
    model.scaler_std = std
    Ztr = model.preprocess(Xtr)
    Zva = model.preprocess(Xva) if len(Xva) else np.zeros((0, sizes[0]))

    if hp.class_weighting:
        freq = np.array([(ytr == 0).mean(), (ytr == 1).mean()])
        sw_tr = 0.5 / freq[ytr.astype(int)]
    else:
        sw_tr = np.ones_like(ytr)

    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    history = []
    best = (np.inf, None, -1)
    wait = 0
    batch = len(Ztr) if full_batch else hp.batch_size
    for epoch in range(hp.max_epochs):
        order = np.arange(len(Ztr)) if full_batch else rng.permutation(len(Ztr))
        for s in range(0, len(order), batch):
            bi = order[s:s + batch]
            masks = None
            if hp.dropout > 0:
                keep = 1.0 - hp.dropout
                masks = [(rng.random((len(bi), h)) < keep) / keep for h in sizes[1:-1]]
            loss, gW, gb = loss_and_grads(model, Ztr[bi], ytr[bi], masks, sw_tr[bi])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            step += 1
            grads = gW + gb
            for k, (p, g) in enumerate(zip(params, grads)):
                m1[k] = hp.beta1 * m1[k] + (1 - hp.beta1) * g
                m2[k] = hp.beta2 * m2[k] + (1 - hp.beta2) * g * g
                mh = m1[k] / (1 - hp.beta1 ** step)
                vh = m2[k] / (1 - hp.beta2 ** step)
                p -= hp.learning_rate * mh / (np.sqrt(vh) + hp.eps)
        tr_logits, _ = forward(model, Ztr)
        tr_loss = bce_from_logits(tr_logits, ytr, sw_tr)
        rec = {"epoch": epoch, "train_loss": tr_loss,
               "train_accuracy": float(((tr_logits >= 0) == (ytr == 1)).mean())}
        if len(Zva):
            va_logits, _ = forward(model, Zva)
            rec["val_loss"] = bce_from_logits(va_logits, yva)
            rec["val_accuracy"] = float(((va_logits >= 0) == (yva == 1)).mean())
            monitor = rec["val_loss"]
        else:
            monitor = tr_loss
        history.append(rec)
        if monitor < best[0] - 1e-12:
            best = (monitor, [p.copy() for p in params], epoch)
            wait = 0
        else:
            wait += 1
            if wait >= hp.patience:
                break
    if best[1] is not None:
        for p, b in zip(params, best[1]):
            p[...] = b
    model.report = {
        "seed": seed, "variant": variant, "n_train": int(len(Xtr)), "n_val": int(len(Xva)),
        "class_counts": {"oversegmented": int((y == 1).sum()), "natural_gap": int((y == 0).sum())},
        "best_epoch": int(best[2]), "epochs": history,
    }
    if len(Zva):
        va = forward(model, Zva)[0]
        model.report["val_accuracy"] = float(((va >= 0) == (yva == 1)).mean())
    return model


# ---------------------------------------------------------------------------
# training data


def synthesize_training_set(gt_volumes, cfg: SynthesisConfig | None = None,
                            seed: int = 0, volume_ids=None) -> list[TrainingExample]:
    """Injected gaps in ground-truth volumes (label 1) plus screened natural pairs (label 0)."""
    cfg = cfg or SynthesisConfig()
    fcfg = cfg.features
    rng = np.random.default_rng(seed)
    out: list[TrainingExample] = []
    any_eligible = False
    for v, gt in enumerate(gt_volumes):
        vid = volume_ids[v] if volume_ids is not None else str(v)
        try:
            injected, records = inject_gaps(gt, cfg.n_true, rng, cfg.min_height)
            any_eligible = True
        except ValueError:
            injected, records = None, []
        if records:
            index = build_cell_index(injected)
            cache: dict = {}
            for r in records:
                a = index[r.cell]
                b = index[r.fresh_label]
                pair = CandidatePair(r.cell, r.fresh_label, (r.layer,), (a.bottom_mask, b.top_mask))
                out.append(TrainingExample(build_feature_vector(pair, index, fcfg, cache),
                                           OVERSEGMENTED,
                                           {"volume": vid, "labels": [r.cell, r.fresh_label],
                                            "source": "synthesized", "gap_layer": r.layer}))
            if cfg.injected_negatives:
                injected_keys = {(r.cell, r.fresh_label) for r in records}
                fresh = {r.fresh_label: r.cell for r in records}
                for pair in screen_candidates(index, fcfg):
                    if pair.key in injected_keys:
                        continue
                    # fragments of one original cell are never a natural gap
                    if fresh.get(pair.label_a, pair.label_a) == fresh.get(pair.label_b, pair.label_b):
                        continue
                    out.append(TrainingExample(build_feature_vector(pair, index, fcfg, cache),
                                               NATURAL_GAP,
                                               {"volume": vid, "labels": list(pair.key),
                                                "source": "screened-injected",
                                                "gap_layers": list(pair.gap_layers)}))
        gt_index = build_cell_index(gt)
        cache = {}
        for pair in screen_candidates(gt_index, fcfg):
            out.append(TrainingExample(build_feature_vector(pair, gt_index, fcfg, cache),
                                       NATURAL_GAP,
                                       {"volume": vid, "labels": list(pair.key),
                                        "source": "screened", "gap_layers": list(pair.gap_layers)}))
    if not any_eligible:
        raise TrainingError("no eligible cells for gap synthesis")
    n1 = sum(e.label for e in out)
    log.info("training set: %d oversegmented, %d natural gaps", n1, len(out) - n1)
    return out


# ---------------------------------------------------------------------------
# persistence


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"buffer holds {arr.size} values, shape {tuple(shape)} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float64)


def model_to_json(model: MlpModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": list(map(int, model.layer_sizes)),
        "weights": [_b64(W) for W in model.weights],
        "biases": [_b64(b) for b in model.biases],
        "activation": {"hidden": "relu", "output": "sigmoid"},
        "scaler": {"mean": _b64(model.scaler_mean), "std": _b64(model.scaler_std),
                   "zero_variance": list(model.zero_variance)},
        "shape_normalizers": {k: _b64(np.array(v)) for k, v in sorted(model.shape_normalizers.items())},
        "threshold": _b64(np.array([model.threshold])),
        "variant": model.variant,
        "seed": int(model.seed),
        "dropout": _b64(np.array([model.dropout])),
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def model_from_json(text: str) -> MlpModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"corrupt model file: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not an overseg model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelVersionError(f"model version {doc.get('version')!r}, this build reads {MODEL_VERSION}")
    try:
        sizes = [int(s) for s in doc["layer_sizes"]]
        weights = [_unb64(w, (sizes[k], sizes[k + 1])) for k, w in enumerate(doc["weights"])]
        biases = [_unb64(b, (sizes[k + 1],)) for k, b in enumerate(doc["biases"])]
        sc = doc["scaler"]
        norms = {k: tuple(_unb64(v, (2,)).tolist()) for k, v in doc["shape_normalizers"].items()}
        return MlpModel(sizes, weights, biases, _unb64(sc["mean"], (sizes[0],)),
                        _unb64(sc["std"], (sizes[0],)), list(sc["zero_variance"]), norms,
                        float(_unb64(doc["threshold"], (1,))[0]), doc["variant"], int(doc["seed"]),
                        float(_unb64(doc["dropout"], (1,))[0]))
    except (KeyError, TypeError, IndexError, ValueError) as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"corrupt model file: {e}") from e


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path) -> MlpModel:
    return model_from_json(Path(path).read_text())
