"""Two-stage training: end-to-end metric training, then frozen-analysis adversarial training."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from .autodiff import Tensor, no_grad
from .autodiff.checkpoint import CheckpointError, load_tensors, save_tensors
from .model import ANALYSIS_GROUPS, SYNTHESIS_GROUPS, Banc, Discriminators, ModelConfig, build_discriminators

log = logging.getLogger("banc.train")

STAGES = ("stage1", "stage2")
CHECKPOINT = "checkpoint.bin"
LOSS_LOG = "losses.jsonl"
MANIFEST = "latest.json"


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        bad = [k for k, p in self.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise FloatingPointError(f"non-finite gradient in {len(bad)} parameter(s), first {bad[:3]}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.dtype, copy=False)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array(self.t)}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}/t"])
        for k, p in self.params.items():
            self.m[k] = np.array(state[f"{prefix}/m/{k}"], dtype=p.dtype)
            self.v[k] = np.array(state[f"{prefix}/v/{k}"], dtype=p.dtype)


def adam_step(params: dict[str, Tensor], state: Adam | None, lr: float, **kw) -> Adam:
    """Functional wrapper: creates the state on first use, then applies one update."""
    state = Adam(params, lr, **kw) if state is None else state
    state.step()
    return state


# ---------------------------------------------------------------------------
# plan and data
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TrainPlan:
    stage1_steps: int = 300
    stage2_steps: int = 100
    lr_generator: float = 1e-4
    lr_discriminator: float = 2e-4
    batch_size: int = 4
    seed: int = 0
    freeze: tuple[str, ...] = ANALYSIS_GROUPS
    save_every: int = 0
    dtype: str = "float32"

    @classmethod
    def desk(cls, **overrides) -> "TrainPlan":
        return replace(cls(), **overrides)

    @classmethod
    def reference(cls, **overrides) -> "TrainPlan":
        return replace(cls(stage1_steps=200_000, stage2_steps=500_000, batch_size=16), **overrides)

    def validate(self, model: Banc | None = None) -> "TrainPlan":
        if self.stage1_steps <= 0 or self.stage2_steps <= 0:
            raise TrainError("step counts must be positive")
        if self.batch_size <= 0:
            raise TrainError("batch_size must be positive")
        groups = set(ANALYSIS_GROUPS + SYNTHESIS_GROUPS)
        unknown = set(self.freeze) - groups
        if unknown:
            raise TrainError(f"freeze list names unknown groups {sorted(unknown)}")
        if np.dtype(self.dtype).kind != "f":
            raise TrainError(f"dtype must be floating point, got {self.dtype}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown plan keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Batch:
    mix: np.ndarray  # [B, 2, L]
    clean: np.ndarray  # [B, S, L]
    bir: np.ndarray  # [B, S, 2, Lb]

    def tensors(self, dtype):
        binaural = Tensor(self.mix.astype(dtype))
        cleans = [Tensor(self.clean[:, i : i + 1].astype(dtype)) for i in range(self.clean.shape[1])]
        birs = [Tensor(self.bir[:, i].astype(dtype)) for i in range(self.bir.shape[1])]
        return binaural, cleans, birs


def as_arrays(dataset) -> dict[str, np.ndarray]:
    """Accepts a list of dataset items or already-stacked arrays."""
    if isinstance(dataset, dict):
        arrays = dataset
    else:
        from .datasynth import stack_items

        if not dataset:
            raise TrainError("dataset is empty")
        arrays = stack_items(list(dataset))
    if arrays["mix"].shape[0] == 0:
        raise TrainError("dataset is empty")
    return arrays


def batch_indices(n_items: int, batch_size: int, seed: int, step: int, stage: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stage, step])
    if batch_size <= n_items:
        return np.sort(rng.choice(n_items, size=batch_size, replace=False))
    return np.sort(rng.integers(0, n_items, size=batch_size))


def get_batch(arrays, idx) -> Batch:
    return Batch(arrays["mix"][idx], arrays["clean"][idx], arrays["bir"][idx])


def _check_dataset(model: Banc, arrays) -> None:
    cfg = model.config
    want = (2, cfg.chunk_samples)
    if arrays["mix"].shape[1:] != want:
        raise TrainError(f"dataset mixes have shape {arrays['mix'].shape[1:]}, model expects {want}")
    if arrays["clean"].shape[1] != cfg.speakers:
        raise TrainError(f"dataset has {arrays['clean'].shape[1]} speakers, model decodes {cfg.speakers}")
    if arrays["bir"].shape[-1] != cfg.bir_samples:
        raise TrainError(f"dataset BIRs have {arrays['bir'].shape[-1]} samples, model emits {cfg.bir_samples}")


# ---------------------------------------------------------------------------
# state, checkpoints
# ---------------------------------------------------------------------------
@dataclass
class TrainState:
    model: Banc
    plan: TrainPlan
    stage: int = 1
    step: int = 0
    opt_g: Adam | None = None
    disc: Discriminators | None = None
    opt_d: Adam | None = None
    history: list[losses.LossReport] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out["state/stage"] = np.array(self.stage)
        out["state/step"] = np.array(self.step)
        if self.opt_g is not None:
            out.update(self.opt_g.state_dict("opt_g"))
        if self.disc is not None:
            out.update({f"disc/{k}": v for k, v in self.disc.state_dict().items()})
        if self.opt_d is not None:
            out.update(self.opt_d.state_dict("opt_d"))
        return out


def _stage_dir(out_dir, stage: int) -> Path:
    return Path(out_dir) / STAGES[stage - 1]


def save_checkpoint(state: TrainState, out_dir) -> Path:
    d = _stage_dir(out_dir, state.stage)
    d.mkdir(parents=True, exist_ok=True)
    path = d / CHECKPOINT
    tmp = path.with_suffix(".tmp")
    save_tensors(tmp, state.tensors())
    tmp.replace(path)
    state.model.config.save(d / "config.json")
    (d / "plan.json").write_text(json.dumps(state.plan.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {"stage": STAGES[state.stage - 1], "step": state.step,
                "checkpoint": str(path.relative_to(Path(out_dir)))}
    (Path(out_dir) / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return load_tensors(path)


def _sub(tensors: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def load_model_weights(model: Banc, path) -> dict[str, np.ndarray]:
    tensors = read_checkpoint(path)
    weights = _sub(tensors, "model")
    if not weights:
        raise CheckpointError(f"{path}: no model tensors")
    model.load_state_dict(weights)
    return tensors


def latest_checkpoint(out_dir) -> tuple[str, int, Path] | None:
    manifest = Path(out_dir) / MANIFEST
    if not manifest.exists():
        return None
    m = json.loads(manifest.read_text())
    return m["stage"], int(m["step"]), Path(out_dir) / m["checkpoint"]


def _read_log(path: Path, upto: int) -> list[losses.LossReport]:
    if not path.exists():
        return []
    reports = [losses.LossReport.from_json(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in reports if r.step < upto]


def _write_log(path: Path, reports) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in reports))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------
def _named(module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": p for k, p in module.named_parameters()}


def _trainable(model: Banc, freeze) -> dict[str, Tensor]:
    out = {}
    for name, group in model.groups().items():
        if name not in freeze:
            out.update(_named(group, name))
    return out


def _frozen(model: Banc, freeze) -> dict[str, Tensor]:
    out = {}
    for name in freeze:
        out.update(_named(model.group(name), name))
    return out


def stage1_step(state: TrainState, arrays) -> losses.LossReport:
    model, plan, cfg = state.model, state.plan, state.model.config
    dtype = model.dtype
    idx = batch_indices(arrays["mix"].shape[0], plan.batch_size, plan.seed, state.step, 1)
    binaural, cleans, birs = get_batch(arrays, idx).tensors(dtype)
    model.train()
    state.opt_g.zero_grad()
    out = model(binaural)
    terms = losses.metric_terms(cfg, binaural, cleans, birs, out.binaural, out.cleans, out.birs)
    gen = losses.gen_loss(terms.total, out.vq_loss, None, cfg.lambda_adv, cfg.lambda_vq)
    report = losses.LossReport.from_terms(state.step, terms, out.vq_loss, gen).check()
    gen.backward()
    state.opt_g.step()
    state.step += 1
    return report


def analysis_codes(model: Banc, binaural: Tensor):
    """Frozen analysis side: eval mode (no EMA, fixed BN statistics) and no gradient."""
    for name in ANALYSIS_GROUPS:
        model.group(name).eval()
    with no_grad():
        zs, zi = model.encode(binaural)
        ps, pi = model.project(zs, zi)
        qs, qi = model.quantize(ps, pi)
    return qs, qi


def stage2_step(state: TrainState, arrays) -> losses.LossReport:
    model, plan, cfg = state.model, state.plan, state.model.config
    dtype = model.dtype
    idx = batch_indices(arrays["mix"].shape[0], plan.batch_size, plan.seed, state.step, 2)
    binaural, cleans, birs = get_batch(arrays, idx).tensors(dtype)
    qs, qi = analysis_codes(model, binaural)
    cleans_hat = model.decode_speech(qs.quantized)
    birs_hat = model.decode_ir(qi.quantized)
    binaural_hat = model.reconstruct(cleans_hat, birs_hat)

    disc = state.disc
    state.opt_d.zero_grad()
    d_loss = losses.disc_loss(disc.binaural, disc.speech, binaural, cleans, binaural_hat, cleans_hat)
    d_loss.backward()
    state.opt_d.step()

    state.opt_g.zero_grad()
    terms = losses.metric_terms(cfg, binaural, cleans, birs, binaural_hat, cleans_hat, birs_hat)
    adv = losses.adv_loss(disc.binaural, disc.speech, binaural_hat, cleans_hat)
    vq = qs.commit_loss + qi.commit_loss
    gen = losses.gen_loss(terms.total, vq, adv, cfg.lambda_adv, cfg.lambda_vq)
    report = losses.LossReport.from_terms(state.step, terms, vq, gen, adv=adv, disc=d_loss).check()
    gen.backward()
    state.opt_g.step()
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
def _prepare(model: Banc, plan: TrainPlan, dataset):
    plan.validate(model)
    arrays = as_arrays(dataset)
    _check_dataset(model, arrays)
    model.to(np.dtype(plan.dtype))
    return arrays


def _run(state: TrainState, arrays, steps: int, step_fn, out_dir, callback) -> TrainState:
    log_path = _stage_dir(out_dir, state.stage) / LOSS_LOG if out_dir is not None else None
    t0 = time.perf_counter()
    while state.step < steps:
        try:
            report = step_fn(state, arrays)
        except FloatingPointError as exc:
            raise TrainError(f"stage {state.stage} diverged at step {state.step}: {exc}") from exc
        state.history.append(report)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(report.to_json() + "\n")
        if callback is not None:
            callback(state, report)
        if report.step % 25 == 0 or state.step == steps:
            log.info("stage %d step %d metric %.4f disc %.4f (%.1fs)", state.stage, report.step,
                     report.metric_total, report.disc, time.perf_counter() - t0)
        if out_dir is not None and plan_save_due(state, steps):
            save_checkpoint(state, out_dir)
    return state


def plan_save_due(state: TrainState, steps: int) -> bool:
    every = state.plan.save_every
    return state.step == steps or (every > 0 and state.step % every == 0)


def _restore(state: TrainState, tensors: dict) -> None:
    state.model.load_state_dict(_sub(tensors, "model"))
    state.step = int(tensors["state/step"])
    if state.opt_g is not None:
        state.opt_g.load_state_dict(tensors, "opt_g")
    if state.disc is not None and any(k.startswith("disc/") for k in tensors):
        state.disc.load_state_dict(_sub(tensors, "disc"))
    if state.opt_d is not None and "opt_d/t" in tensors:
        state.opt_d.load_state_dict(tensors, "opt_d")


def _resume_point(out_dir, stage: int):
    if out_dir is None:
        return None
    path = _stage_dir(out_dir, stage) / CHECKPOINT
    if not path.exists():
        return None
    tensors = read_checkpoint(path)
    if int(tensors["state/stage"]) != stage:
        raise CheckpointError(f"{path}: holds stage {int(tensors['state/stage'])}, expected {stage}")
    return tensors


def run_stage1(model: Banc, dataset, plan: TrainPlan, out_dir=None, resume: bool = False,
               callback: Callable | None = None) -> TrainState:
    """End-to-end training on metric loss plus commitment loss."""
    arrays = _prepare(model, plan, dataset)
    state = TrainState(model, plan, stage=1)
    state.opt_g = Adam(_trainable(model, ()), plan.lr_generator)
    tensors = _resume_point(out_dir, 1) if resume else None
    if tensors is not None:
        _restore(state, tensors)
        state.history = _read_log(_stage_dir(out_dir, 1) / LOSS_LOG, state.step)
    if out_dir is not None:
        _write_log(_stage_dir(out_dir, 1) / LOSS_LOG, state.history)
    return _run(state, arrays, plan.stage1_steps, stage1_step, out_dir, callback)


def run_stage2(model: Banc, dataset, plan: TrainPlan, out_dir=None, resume: bool = False,
               stage1_checkpoint=None, callback: Callable | None = None) -> TrainState:
    """Adversarial fine-tuning of the synthesis side with the analysis side frozen."""
    if stage1_checkpoint is None and out_dir is not None:
        candidate = _stage_dir(out_dir, 1) / CHECKPOINT
        stage1_checkpoint = candidate if candidate.exists() else None
    if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
        raise TrainError("stage 2 needs a stage-1 checkpoint")
    arrays = _prepare(model, plan, dataset)
    s1 = read_checkpoint(stage1_checkpoint)
    if int(s1.get("state/stage", -1)) != 1:
        raise CheckpointError(f"{stage1_checkpoint}: not a stage-1 checkpoint")
    model.load_state_dict(_sub(s1, "model"))
    model.to(np.dtype(plan.dtype))
    state = TrainState(model, plan, stage=2)
    state.disc = build_discriminators(model.config, np.dtype(plan.dtype))
    state.opt_g = Adam(_trainable(model, plan.freeze), plan.lr_generator)
    state.opt_d = Adam(_named(state.disc, "disc"), plan.lr_discriminator)
    tensors = _resume_point(out_dir, 2) if resume else None
    if tensors is not None:
        _restore(state, tensors)
        state.history = _read_log(_stage_dir(out_dir, 2) / LOSS_LOG, state.step)
    if out_dir is not None:
        _write_log(_stage_dir(out_dir, 2) / LOSS_LOG, state.history)
    frozen = _frozen(model, plan.freeze)
    for p in frozen.values():
        p.requires_grad = False
    try:
        return _run(state, arrays, plan.stage2_steps, stage2_step, out_dir, callback)
    finally:
        for p in frozen.values():
            p.requires_grad = True


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------
def evaluate_metric(model: Banc, dataset, batch_size: int = 4) -> float:
    """Mean metric loss over a fixed set in eval mode (no EMA updates, running BN statistics)."""
    arrays = as_arrays(dataset)
    cfg, dtype = model.config, model.dtype
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with no_grad():
            n = arrays["mix"].shape[0]
            for start in range(0, n, batch_size):
                idx = np.arange(start, min(n, start + batch_size))
                binaural, cleans, birs = get_batch(arrays, idx).tensors(dtype)
                out = model(binaural)
                val = losses.metric_loss(cfg, binaural, cleans, birs, out.binaural, out.cleans, out.birs)
                total += val.item() * len(idx)
                count += len(idx)
    finally:
        model.train(was_training)
    return total / count


def block_means(values, block: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // block
    return values[: n * block].reshape(n, block).mean(axis=1)


def trend_violations(values, block: int = 50) -> int:
    """Number of increases between consecutive block means."""
    means = block_means(values, block)
    return int(np.sum(np.diff(means) > 0))


def load_plan(path) -> TrainPlan:
    return TrainPlan.from_dict(json.loads(Path(path).read_text()))


def build_for_training(config: ModelConfig, plan: TrainPlan) -> Banc:
    from .model import build_model

    return build_model(config, np.dtype(plan.dtype))
