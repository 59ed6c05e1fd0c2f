"""Adam training loop, loss grid search, validation protocols and the kernel sweep."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import SplitPlan, WindowedDataset, split_kfold, split_loco
from .errors import ConfigError, MEEGNetError, NumericError, ShapeError
from .evaluation import MetricsReport, confusion, evaluate_scope, prf_metrics
from .losses import CBF_GRID, FL_GRID, LossConfig, loss_gradient, loss_value
from .model import MEEGNet, ModelConfig, build, save_checkpoint

log = logging.getLogger(__name__)


def derive_seed(base, *tags) -> int:
    """Independent 63-bit seed for a named purpose (``"init"``, ``"shuffle"``, ...)."""
    words = [int(base)]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode())
        else:
            words.append(int(tag))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 50
    shuffle_seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when given")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, cfg: OptimizerConfig):
    """In-place bias-corrected Adam update of ``params``; returns ``(params, state)``."""
    if t < 1:
        raise ConfigError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)).astype(p.dtype)
    state.t = t
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None
    val_f1: float | None = None
    seconds: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    @property
    def train_loss(self):
        return [e.train_loss for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        # wall-clock time is left out so that reruns produce identical files
        writer.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.train_loss),
                             "" if e.val_loss is None else repr(e.val_loss),
                             "" if e.val_f1 is None else repr(e.val_f1)])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())


def _windows(data):
    if isinstance(data, WindowedDataset):
        return data.X, data.Y
    X, Y = data
    return np.asarray(X), np.asarray(Y)


def _param_norms(model: MEEGNet):
    return {name: float(np.linalg.norm(layer.params[key])) for name, layer, key in model.named_params()}


def train(model: MEEGNet, train_windows, loss_cfg: LossConfig, opt_cfg: OptimizerConfig,
          validation_windows=None):
    """Mini-batch Adam on the mean cell loss. Returns ``(model, history)``.

    The class counts used by the class-balanced loss are taken from the
    training labels. Batch norm and dropout run in training mode for every
    update; validation uses inference mode.
    """
    X, Y = _windows(train_windows)
    if len(X) == 0:
        raise ConfigError("training set is empty")
    if len(X) != len(Y):
        raise ShapeError(f"{len(X)} windows but {len(Y)} label rows")
    loss_cfg = loss_cfg.with_counts(Y)
    dtype = model.dtype
    rng = np.random.default_rng(np.random.SeedSequence([int(opt_cfg.shuffle_seed)]))
    state = AdamState()
    history = TrainHistory()
    params = {name: layer.params[key] for name, layer, key in model.named_params()}
    best = (np.inf, None)
    bad_epochs = 0
    bs = opt_cfg.batch_size
    for epoch in range(opt_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(X))
        total = 0.0
        for batch_no, start in enumerate(range(0, len(X), bs)):
            idx = np.sort(order[start:start + bs])
            xb = X[idx].astype(dtype, copy=False)
            yb = Y[idx].astype(dtype, copy=False)
            probs = model.forward(xb, training=True, cache=True)
            loss = loss_value(probs, yb, loss_cfg).mean
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {batch_no}; "
                    f"parameter norms {_param_norms(model)}")
            grads = model.backward(loss_gradient(probs, yb, loss_cfg))
            # params dict entries may have been replaced by max-norm projection
            params = {name: layer.params[key] for name, layer, key in model.named_params()}
            adam_step(params, grads, state, state.t + 1, opt_cfg)
            model.apply_max_norm()
            total += loss * len(idx)
        model.clear_caches()
        record = EpochRecord(epoch + 1, total / len(X))
        if validation_windows is not None:
            Xv, Yv = _windows(validation_windows)
            pv = model.predict(Xv)
            record.val_loss = loss_value(pv, Yv.astype(dtype), loss_cfg).mean
            record.val_f1 = prf_metrics(confusion(pv, Yv, model.config.decision_threshold)).f1
        record.seconds = time.perf_counter() - t0
        history.epochs.append(record)
        log.debug("epoch %d loss %.5f", record.epoch, record.train_loss)
        patience = opt_cfg.early_stop_patience
        if patience is not None and record.val_loss is not None:
            if record.val_loss < best[0]:
                best = (record.val_loss, model.state())
                best = (best[0], {k: v.copy() for k, v in best[1].items()})
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= patience:
                    model.load_state(best[1])
                    history.stopped_early = True
                    break
    return model, history


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridCandidate:
    params: dict
    fold_f1: list[float]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))


@dataclass
class GridResult:
    family: str
    candidates: list[GridCandidate]
    best_index: int

    @property
    def best(self) -> GridCandidate:
        return self.candidates[self.best_index]

    def best_loss(self, base: LossConfig | None = None) -> LossConfig:
        d = (base or LossConfig()).to_dict()
        d.update(kind=self.family, **self.best.params)
        return LossConfig(**d)


def grid_candidates(family, grid=None):
    family = family.lower()
    if family == "fl":
        grid = grid or FL_GRID
        keys = ("alpha", "gamma")
    elif family == "cbf":
        grid = grid or CBF_GRID
        keys = ("beta", "gamma")
    else:
        raise ConfigError(f"grid search is defined for fl and cbf, not {family!r}")
    missing = [k for k in keys if k not in grid or not len(grid[k])]
    if missing:
        raise ConfigError(f"grid for {family} needs non-empty values for {missing}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search_loss(train_windows, family, grid=None, opt_cfg: OptimizerConfig | None = None,
                     model_cfg: ModelConfig | None = None, seed=0, inner_folds=3,
                     base_loss: LossConfig | None = None) -> GridResult:
    """Pick the loss hyperparameters with the best mean inner-fold F1.

    Every candidate is trained from scratch on identical inner splits and
    initial weights. Ties keep the first candidate in enumeration order.
    """
    X, Y = _windows(train_windows)
    opt_cfg = opt_cfg or OptimizerConfig()
    model_cfg = model_cfg or ModelConfig()
    candidates = grid_candidates(family, grid)
    plan = split_kfold(len(X), inner_folds, derive_seed(seed, "inner-split"))
    out = []
    for params in candidates:
        d = (base_loss or LossConfig()).to_dict()
        d.update(kind=family.lower(), **params)
        loss_cfg = LossConfig(**d)
        scores = []
        for i, (tr, te) in enumerate(plan):
            model = build(model_cfg, derive_seed(seed, "inner-init", i))
            opt = replace(opt_cfg, shuffle_seed=derive_seed(seed, "inner-shuffle", i))
            train(model, (X[tr], Y[tr]), loss_cfg, opt)
            m = prf_metrics(confusion(model.predict(X[te]), Y[te], model_cfg.decision_threshold))
            if Y[te].sum() == 0:
                log.warning("grid search: inner fold %d has no positive cells; F1 counted as 0", i)
            scores.append(0.0 if m.f1 is None else m.f1)
        out.append(GridCandidate(params, scores))
    means = [c.mean_f1 for c in out]
    return GridResult(family.lower(), out, int(np.argmax(means)))


# ---------------------------------------------------------------------------
# validation protocols
# ---------------------------------------------------------------------------

@dataclass
class Session:
    repeat: int
    fold: int
    key: str
    seed: int
    init_seed: int
    test_index: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    report: MetricsReport
    case_reports: list[MetricsReport]
    history: TrainHistory
    loss: LossConfig
    checkpoint: str | None = None


@dataclass
class ProtocolResult:
    protocol: str
    model_config: ModelConfig
    sessions: list[Session]
    plan_fingerprints: list[str]

    @property
    def reports(self):
        return [s.report for s in self.sessions]

    @property
    def case_reports(self):
        return [r for s in self.sessions for r in s.case_reports]


def make_plans(ds: WindowedDataset, protocol="kfold", seeds=(0,), k=5) -> list[SplitPlan]:
    if protocol == "kfold":
        return [split_kfold(len(ds), k, derive_seed(s, "split")) for s in seeds]
    if protocol == "loco":
        return [split_loco(ds) for _ in seeds]
    raise ConfigError(f"unknown protocol {protocol!r}; expected kfold or loco")


def run_protocol(ds: WindowedDataset, protocol="kfold", model_cfg: ModelConfig | None = None,
                 loss_cfg: LossConfig | None = None, opt_cfg: OptimizerConfig | None = None,
                 seeds=(0,), k=5, run_dir=None, gridsearch=False, grid=None,
                 plans: list[SplitPlan] | None = None, progress=None) -> ProtocolResult:
    """Train and test one model per (seed, fold); each seed is one repeat of the protocol."""
    model_cfg = model_cfg or ModelConfig()
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    plans = plans or make_plans(ds, protocol, seeds, k)
    if len(plans) != len(seeds):
        raise ConfigError(f"{len(plans)} split plans for {len(seeds)} seeds")
    sessions = []
    for repeat, (seed, plan) in enumerate(zip(seeds, plans)):
        for fold, (tr, te) in enumerate(plan):
            key = plan.keys[fold] if plan.keys else f"fold{fold}"
            fold_loss = loss_cfg
            if gridsearch:
                result = grid_search_loss(ds.subset(tr), loss_cfg.kind, grid, opt_cfg, model_cfg,
                                          seed=derive_seed(seed, "grid", fold), base_loss=loss_cfg)
                fold_loss = result.best_loss(loss_cfg)
            init_seed = derive_seed(seed, "init", fold)
            model = build(model_cfg, init_seed)
            opt = replace(opt_cfg, shuffle_seed=derive_seed(seed, "shuffle", fold))
            try:
                model, history = train(model, (ds.X[tr], ds.Y[tr]), fold_loss, opt)
            except MEEGNetError as exc:
                raise type(exc)(f"{protocol} seed {seed} {key} (K={model_cfg.temporal_kernel}): {exc}") from exc
            probs = model.predict(ds.X[te])
            labels = ds.Y[te]
            report = evaluate_scope(key, probs, labels, model_cfg.decision_threshold)
            cases = ds.case_ids[te]
            case_reports = [evaluate_scope(c, probs[cases == c], labels[cases == c],
                                           model_cfg.decision_threshold)
                            for c in dict.fromkeys(cases.tolist())]
            ckpt = None
            if run_dir is not None:
                sdir = Path(run_dir) / protocol / f"seed{seed}" / f"K{model_cfg.temporal_kernel}" / key
                sdir.mkdir(parents=True, exist_ok=True)
                ckpt = str(save_checkpoint(model, sdir / "model.ckpt"))
                history.write(sdir / "history.csv")
            sessions.append(Session(repeat, fold, key, int(seed), init_seed, te, probs, labels,
                                    report, case_reports, history, fold_loss, ckpt))
            if progress is not None:
                progress(sessions[-1])
    return ProtocolResult(protocol, model_cfg, sessions, [p.fingerprint() for p in plans])


def kernel_sweep(ds: WindowedDataset, kernel_list=(10, 50, 125, 250), protocol="kfold",
                 seeds=(0,), model_cfg: ModelConfig | None = None,
                 loss_cfg: LossConfig | None = None, opt_cfg: OptimizerConfig | None = None,
                 k=5, run_dir=None, progress=None) -> dict[int, ProtocolResult]:
    """One full validation run per kernel size on shared splits and seeds (paired design)."""
    model_cfg = model_cfg or ModelConfig()
    plans = make_plans(ds, protocol, seeds, k)
    out = {}
    for ksize in kernel_list:
        cfg = replace(model_cfg, temporal_kernel=int(ksize))
        try:
            out[int(ksize)] = run_protocol(ds, protocol, cfg, loss_cfg, opt_cfg, seeds, k,
                                           run_dir, plans=plans, progress=progress)
        except MEEGNetError as exc:
            raise type(exc)(f"kernel size {ksize}: {exc}") from exc
    return out
