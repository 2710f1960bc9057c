"""Loss, learning-rate schedule, training loop, greedy hyperparameter search, checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, eval_window, random_crop_pad, random_lead_dropout
from .exceptions import CheckpointError, ConfigurationError, TrainingDivergedError
from .metrics import ScoreWeights, challenge_score, macro_average_precision, threshold
from .network import MDARsn, ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    dropout: float = 0.2
    batch_size: int = 96
    warmup_steps: int = 1000
    max_steps: int = 10000
    patience_epochs: int = 5
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.warmup_steps < self.max_steps:
            raise ConfigurationError(
                f"need 0 <= warmup_steps < max_steps, got {self.warmup_steps}, {self.max_steps}"
            )
        if self.patience_epochs < 1:
            raise ConfigurationError(f"patience_epochs must be >= 1, got {self.patience_epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def bce_loss(logits, targets) -> torch.Tensor:
    """Binary cross entropy averaged over batch and classes, computed from logits."""
    targets = torch.as_tensor(targets).to(logits.dtype)
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="mean")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``max_steps``."""
    peak, warm, total = cfg.learning_rate, cfg.warmup_steps, cfg.max_steps
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < warm:
        return peak * step / warm
    if step > total:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class EcgDataset:
    """Preprocessed recordings held in memory.

    ``signals`` is a list of ``(n_leads, n_samples)`` arrays at the model's
    sampling rate (lengths may differ); ``masks`` ``(n, n_leads)`` bool;
    ``labels`` ``(n, d_class)`` bool.
    """

    signals: list
    masks: np.ndarray
    labels: np.ndarray
    record_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=bool)
        n = len(self.signals)
        if self.masks.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError(
                f"{n} signals but {self.masks.shape[0]} masks and {self.labels.shape[0]} label rows"
            )
        if not self.record_ids:
            self.record_ids = [str(i) for i in range(n)]

    def __len__(self):
        return len(self.signals)

    def subset(self, idx) -> "EcgDataset":
        idx = list(idx)
        return EcgDataset(
            [self.signals[i] for i in idx], self.masks[idx], self.labels[idx],
            [self.record_ids[i] for i in idx],
        )


def make_batch(data: EcgDataset, idx, model_cfg: ModelConfig, training: bool,
               aug: AugmentConfig | None = None, rng: np.random.Generator | None = None):
    xs, ms = [], []
    for i in idx:
        sig = data.signals[i]
        mask = data.masks[i]
        if training:
            xs.append(random_crop_pad(sig, model_cfg.fs, aug, rng))
            ms.append(random_lead_dropout(mask, aug, rng))
        else:
            xs.append(eval_window(sig, model_cfg.fs, model_cfg.window_seconds))
            ms.append(mask)
    x = torch.as_tensor(np.stack(xs).astype(np.float32))
    return x, torch.as_tensor(np.stack(ms)), torch.as_tensor(data.labels[list(idx)])


@torch.no_grad()
def predict_logits(model: MDARsn, data: EcgDataset, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        x, m, _ = make_batch(data, idx, model.cfg, training=False)
        out.append(model(x, m).double().numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, model.cfg.d_class))
    return np.concatenate(out)


def predict_proba(model: MDARsn, data: EcgDataset, batch_size: int = 32) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-predict_logits(model, data, batch_size)))


def evaluate(model, data: EcgDataset, weights: ScoreWeights, t: float = 0.5) -> dict:
    probs = predict_proba(model, data)
    preds = threshold(probs, t)
    return {
        "macro_ap": macro_average_precision(data.labels, probs),
        "challenge_score": challenge_score(data.labels, preds, weights),
        "probabilities": probs,
        "predictions": preds,
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "step", "train_loss", "val_prc", "val_challenge", "lr")


@dataclass
class TrainResult:
    best_state: dict
    history: list
    best_epoch: int
    best_prc: float
    steps: int
    stopped_early: bool


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_loop(model: MDARsn, train_data: EcgDataset, val_data: EcgDataset, cfg: TrainConfig,
               aug: AugmentConfig | None = None, weights: ScoreWeights | None = None,
               on_epoch=None) -> TrainResult:
    """Adam on the warmup/cosine schedule with per-epoch early stopping on validation PRC.

    The model is left holding the best snapshot: highest validation macro AP
    (strict improvement), ties on AP broken by the validation challenge score. ``on_epoch`` receives each history row.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation data must be non-empty")
    aug = replace(aug or AugmentConfig(), window_seconds=model.cfg.window_seconds)
    if weights is None:
        weights = ScoreWeights(np.eye(model.cfg.d_class), 0)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model.reseed_mixstyle(cfg.seed)
    for m in model.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = cfg.dropout
    opt = torch.optim.Adam(model.parameters(), lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps)

    step, epoch = 0, 0
    best_prc, best_epoch, best_state = -math.inf, 0, _snapshot(model)
    best_challenge = -math.inf
    since_best = 0
    history = []
    stopped_early = False
    while step < cfg.max_steps:
        epoch += 1
        model.train()
        order = rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            x, m, y = make_batch(train_data, idx, model.cfg, True, aug, rng)
            lr = lr_at(step + 1, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = bce_loss(model(x, m), y)
            if not torch.isfinite(loss):
                ids = [train_data.record_ids[i] for i in idx]
                raise TrainingDivergedError(
                    f"non-finite loss at step {step + 1} (lr={lr:.3g}, batch={ids[:8]})",
                    step=step + 1, lr=lr, batch_ids=ids,
                )
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            losses.append(loss.item())

        scores = evaluate(model, val_data, weights, cfg.threshold)
        row = {
            "epoch": epoch,
            "step": step,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_prc": scores["macro_ap"],
            "val_challenge": scores["challenge_score"],
            "lr": lr_at(step, cfg),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        logger.info("epoch %d step %d loss %.4f prc %.4f challenge %.4f", epoch, step,
                    row["train_loss"], row["val_prc"], row["val_challenge"])
        if row["val_prc"] > best_prc:
            best_prc, best_epoch, best_state = row["val_prc"], epoch, _snapshot(model)
            best_challenge = row["val_challenge"]
            since_best = 0
        else:
            # an equal PRC never resets patience, but a better challenge score
            # on that plateau replaces the snapshot
            if row["val_prc"] == best_prc and row["val_challenge"] > best_challenge:
                best_epoch, best_state = epoch, _snapshot(model)
                best_challenge = row["val_challenge"]
            since_best += 1
            if since_best >= cfg.patience_epochs:
                stopped_early = True
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, history, best_epoch, best_prc, step, stopped_early)


def write_history(history, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple = (1e-4, 1e-3)
    dropout: tuple = (0.1, 0.5)
    n_mix: tuple = (1, 2, 3)
    resb_kernel: tuple = (5, 7, 9, 11, 13, 15, 17)
    n_resblocks: tuple = (6, 8, 10, 12)
    grid_points: int = 5

    def grids(self):
        """Candidate lists in search order."""
        lo, hi = self.learning_rate
        dlo, dhi = self.dropout
        return [
            ("learning_rate", [float(v) for v in np.geomspace(lo, hi, self.grid_points)]),
            ("dropout", [float(v) for v in np.linspace(dlo, dhi, self.grid_points)]),
            ("n_mix", list(self.n_mix)),
            ("resb_kernel", list(self.resb_kernel)),
            ("n_resblocks", list(self.n_resblocks)),
        ]


TRAIN_KEYS = {"learning_rate", "dropout"}


@dataclass
class SearchResult:
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    objective: float
    trials: list
    warnings: list

    def to_dict(self):
        return {
            "best": {"train": self.train_cfg.to_dict(), "model": self.model_cfg.to_dict(),
                     "objective": self.objective},
            "trials": self.trials,
            "warnings": self.warnings,
        }


def _apply(train_cfg, model_cfg, name, value):
    if name in TRAIN_KEYS:
        train_cfg = replace(train_cfg, **{name: value})
        if name == "dropout":
            model_cfg = replace(model_cfg, dropout=value)
    else:
        model_cfg = replace(model_cfg, **{name: value})
    return train_cfg, model_cfg


def _current(train_cfg, model_cfg, name):
    return getattr(train_cfg, name) if name in TRAIN_KEYS else getattr(model_cfg, name)


def hyperparameter_search(objective, budget: int, train_cfg: TrainConfig | None = None,
                          model_cfg: ModelConfig | None = None,
                          space: SearchSpace = SearchSpace()) -> SearchResult:
    """Coordinate-wise greedy maximisation of ``objective(train_cfg, model_cfg)``.

    One hyperparameter is swept at a time with the others held at the
    incumbent; the incumbent moves only on strict improvement. ``budget``
    caps objective evaluations, the first of which scores the incumbent.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    grids = space.grids()
    warnings = []
    trials = []

    def run(tc, mc):
        score = float(objective(tc, mc))
        trials.append({
            "trial": len(trials),
            "params": {name: _current(tc, mc, name) for name, _ in grids},
            "objective": score,
        })
        return score

    best = run(train_cfg, model_cfg)
    sweep_size = 1 + sum(
        sum(1 for v in grid if v != _current(train_cfg, model_cfg, name)) for name, grid in grids
    )
    if budget < sweep_size:
        warnings.append(
            f"partial search: budget {budget} is smaller than one full sweep ({sweep_size} evaluations)"
        )
    for name, grid in grids:
        base_train, base_model = train_cfg, model_cfg
        for value in grid:
            if value == _current(base_train, base_model, name):
                continue
            if len(trials) >= budget:
                break
            try:
                tc, mc = _apply(base_train, base_model, name, value)
            except ConfigurationError as exc:
                warnings.append(f"skipped {name}={value}: {exc}")
                continue
            score = run(tc, mc)
            if score > best:
                best, train_cfg, model_cfg = score, tc, mc
    return SearchResult(train_cfg, model_cfg, best, trials, warnings)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _persistent_state(model):
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(model: MDARsn, path, classes=None) -> Path:
    """Write ``config.json``, ``manifest.json`` and ``params.bin`` (float32 LE) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in _persistent_state(model).items():
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    config = {"format_version": CHECKPOINT_VERSION, "model": model.cfg.to_dict(),
              "classes": list(classes) if classes is not None else None}
    manifest = {"dtype": "float32-le", "total_bytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(), "entries": entries}
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (path / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    return path


def load_checkpoint(path, expected_n_leads: int | None = None):
    """Rebuild the model from a checkpoint directory. Returns ``(model, classes)``.

    Everything is validated before any tensor is copied into the model, so a
    corrupt checkpoint never yields a partially loaded model.
    """
    path = Path(path)
    for name in ("config.json", "manifest.json", "params.bin"):
        if not (path / name).exists():
            raise CheckpointError(f"checkpoint {path} is missing {name}")
    try:
        config = json.loads((path / "config.json").read_text())
        manifest = json.loads((path / "manifest.json").read_text())
        cfg = ModelConfig.from_dict(config["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path}: unreadable config/manifest ({exc})") from exc
    if expected_n_leads is not None and cfg.n_leads != expected_n_leads:
        raise CheckpointError(
            f"checkpoint {path} was trained on {cfg.n_leads} leads, data has {expected_n_leads}"
        )
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(
            f"checkpoint {path}: params.bin has {len(blob)} bytes, manifest expects {manifest.get('total_bytes')}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"checkpoint {path}: params.bin checksum mismatch")

    model = MDARsn(cfg)
    expected = _persistent_state(model)
    listed = {e["name"]: e for e in manifest["entries"]}
    missing = sorted(set(expected) - set(listed))
    extra = sorted(set(listed) - set(expected))
    if missing:
        raise CheckpointError(f"checkpoint {path}: parameter {missing[0]!r} missing from manifest")
    if extra:
        raise CheckpointError(f"checkpoint {path}: unexpected parameter {extra[0]!r}")
    state = {}
    for name, tensor in expected.items():
        e = listed[name]
        if list(tensor.shape) != e["shape"]:
            raise CheckpointError(
                f"checkpoint {path}: parameter {name!r} has shape {e['shape']}, "
                f"config implies {list(tensor.shape)}"
            )
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"checkpoint {path}: parameter {name!r} has an invalid extent")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state, strict=False)
    model.eval()
    return model, config.get("classes")


def state_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def clone_model(model: MDARsn) -> MDARsn:
    return copy.deepcopy(model)
