"""Joint training and co-evolving sampling of the two diffusion models.

Each training step draws one shared timestep, noises both variable types at
that step, and feeds each model the other type's noised state as its
condition. The combined objective per model is its diffusion loss plus a
weighted triplet loss built from shuffled-condition estimates. Sampling runs
the two reverse chains in lockstep: both updates at step i read the step-i
states of both chains.

Conditions are plain arrays, so no gradient flows from one model's loss into
the other model's parameters.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import categorical, contrastive, gaussian, nn
from .data import TableSchema
from .errors import CheckpointError, ConfigError, NumericsError
from .rng import substream
from .schedule import NoiseSchedule, linear_schedule

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 256
    epochs: int = 2000
    hidden: tuple[int, int, int] = (64, 128, 256)
    emb_dim: int = 16
    lambda_c: float = 0.2
    lambda_d: float = 0.2
    margin: float = 1.0
    negative_method: str = "method3"
    seed: int = 0
    per_row_t: bool = False
    timesteps: int = 50
    beta_start: float = 1e-5
    beta_end: float = 2e-2

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for lam, name in ((self.lambda_c, "lambda_c"), (self.lambda_d, "lambda_d")):
            if not 0.0 <= lam < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {lam}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.negative_method not in contrastive.METHODS:
            raise ConfigError(f"unknown negative_method {self.negative_method!r}")
        if len(self.hidden) != 3:
            raise ConfigError(f"hidden must have 3 dims, got {self.hidden}")


@dataclass
class StepLosses:
    """Per-step loss components; the contrastive entries are the weighted
    contributions actually added to each model's objective."""
    diff_c: float = 0.0
    cl_c: float = 0.0
    diff_d: float = 0.0
    cl_d: float = 0.0

    def total_c(self) -> float:
        return self.diff_c + self.cl_c

    def total_d(self) -> float:
        return self.diff_d + self.cl_d


@dataclass
class TwinModel:
    schema: TableSchema
    config: TrainConfig
    sched: NoiseSchedule
    net_c: nn.DiffusionMLP | None
    net_d: nn.DiffusionMLP | None
    opt_c: nn.AdamState | None
    opt_d: nn.AdamState | None
    steps_done: int = 0

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.schema.cat_sizes


def build_model(schema: TableSchema, config: TrainConfig) -> TwinModel:
    """Fresh model pair for a schema; either net is omitted when its variable
    type is absent, and conditions are zero-width in that case."""
    config.validate()
    n_cont = schema.n_cont
    sum_k = int(sum(schema.cat_sizes))
    if n_cont == 0 and sum_k == 0:
        raise ConfigError("schema has no columns")
    rng = substream(config.seed, "init")
    sched = linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    net_c = net_d = opt_c = opt_d = None
    if n_cont > 0:
        net_c = nn.DiffusionMLP(n_cont, sum_k, n_cont, config.hidden, config.emb_dim, rng)
        opt_c = nn.AdamState(net_c.params(), config.lr)
    if sum_k > 0:
        net_d = nn.DiffusionMLP(sum_k, n_cont, sum_k, config.hidden, config.emb_dim, rng)
        opt_d = nn.AdamState(net_d.params(), config.lr)
    return TwinModel(schema, config, sched, net_c, net_d, opt_c, opt_d)


def train_step(model: TwinModel, x0_c: np.ndarray, x0_d: np.ndarray,
               rng_train: np.random.Generator,
               rng_neg: np.random.Generator) -> StepLosses:
    """One optimizer step on each model from one batch.

    Draw order is fixed: timestep(s), continuous noise, discrete noising
    draws from the training stream; then the negative permutations from
    their own stream (only when a contrastive weight is nonzero, so plain
    diffusion runs consume identical training draws).
    """
    cfg = model.config
    T = model.sched.timesteps
    rows = x0_c.shape[0] if model.net_c else x0_d.shape[0]
    if rows < 2:
        raise ConfigError(f"training batch needs >= 2 rows, got {rows}")

    if cfg.per_row_t:
        t = rng_train.integers(1, T + 1, size=rows)
    else:
        t = int(rng_train.integers(1, T + 1))

    x_t_c = eps = None
    if model.net_c:
        eps = rng_train.standard_normal(x0_c.shape)
        x_t_c = gaussian.forward_sample_cont(x0_c, t, eps, model.sched)
    x_t_d = None
    if model.net_d:
        probs = categorical.forward_marginal_cat(x0_d, t, model.sched, model.sizes)
        x_t_d = categorical.sample_cat(probs, model.sizes, rng_train)

    cond_for_c = x_t_d if model.net_d else np.zeros((rows, 0))
    cond_for_d = x_t_c if model.net_c else np.zeros((rows, 0))

    eps_pred = logits = None
    loss_c = loss_d = None
    losses = StepLosses()
    if model.net_c:
        eps_pred = model.net_c.forward(x_t_c, cond_for_c, t)
        loss_c = gaussian.loss_diff_c(eps_pred, eps)
        losses.diff_c = float(loss_c.value)
    if model.net_d:
        logits = model.net_d.forward(x_t_d, cond_for_d, t)
        loss_d = categorical.loss_diff_d(x0_d, x_t_d, logits, t, model.sched, model.sizes)
        losses.diff_d = float(loss_d.value)

    contrastive_on = (model.net_c and model.net_d
                      and (cfg.lambda_c > 0 or cfg.lambda_d > 0))
    if contrastive_on:
        pair = contrastive.make_negative_condition(
            x_t_c, x_t_d, rng_neg, model.sizes, cfg.negative_method)
        if cfg.lambda_c > 0:
            cl_c = contrastive.contrastive_loss_c(
                x0_c, x_t_c, x_t_d, pair.neg_cond_d, model.net_c, t,
                model.sched, cfg.margin, eps_pos=eps_pred)
            losses.cl_c = cfg.lambda_c * float(cl_c.value)
            loss_c = nn.add(loss_c, nn.mul(nn.as_var(cfg.lambda_c), cl_c))
        if cfg.lambda_d > 0:
            cl_d = contrastive.contrastive_loss_d(
                x0_d, x_t_d, x_t_c, pair.neg_cond_c, model.net_d, t,
                model.sched, cfg.margin, sizes=model.sizes, logits_pos=logits)
            losses.cl_d = cfg.lambda_d * float(cl_d.value)
            loss_d = nn.add(loss_d, nn.mul(nn.as_var(cfg.lambda_d), cl_d))

    for name, val in (("loss_c", losses.total_c()), ("loss_d", losses.total_d())):
        if not np.isfinite(val):
            raise NumericsError(
                f"non-finite {name} at step {model.steps_done + 1} "
                f"(t={t}, components={losses})"
            )

    grads_c = nn.backward(loss_c, model.net_c.params()) if model.net_c else None
    grads_d = nn.backward(loss_d, model.net_d.params()) if model.net_d else None
    if grads_c is not None:
        nn.adam_step(model.net_c.params(), grads_c, model.opt_c)
    if grads_d is not None:
        nn.adam_step(model.net_d.params(), grads_d, model.opt_d)
    model.steps_done += 1
    return losses


def train(model: TwinModel, x0_c: np.ndarray, x0_d: np.ndarray,
          log_fn=None, epochs: int | None = None) -> list[StepLosses]:
    """Epoch-based training with full reshuffles; batches with fewer than
    2 rows are dropped. Returns the per-step loss history.

    The random streams are keyed by (seed, steps already done), so resuming
    or calling train() again continues with fresh draws instead of replaying
    the first call's noise sequence.
    """
    cfg = model.config
    rng_train = substream(cfg.seed, "train", model.steps_done)
    rng_neg = substream(cfg.seed, "negative", model.steps_done)
    n = x0_c.shape[0] if model.net_c else x0_d.shape[0]
    history: list[StepLosses] = []
    for _ in range(epochs if epochs is not None else cfg.epochs):
        order = rng_train.permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            if idx.size < 2:
                continue
            losses = train_step(model,
                                x0_c[idx] if model.net_c else np.zeros((idx.size, 0)),
                                x0_d[idx] if model.net_d else np.zeros((idx.size, 0)),
                                rng_train, rng_neg)
            history.append(losses)
            if log_fn is not None:
                log_fn(model.steps_done, losses)
    return history


def reverse_pair_step(model: TwinModel, x_c, x_d, t: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One synchronized reverse step: all random draws happen first, then
    both updates are computed from the step-t states, so the result does not
    depend on which chain is advanced first."""
    noise_c = None
    if model.net_c:
        noise_c = rng.standard_normal(x_c.shape) if t > 1 else np.zeros_like(x_c)
    next_c, next_d = x_c, x_d
    if model.net_c:
        cond = x_d if model.net_d else np.zeros((x_c.shape[0], 0))
        eps_pred = model.net_c.forward(x_c, cond, t).value
        next_c = gaussian.reverse_step_cont(x_c, eps_pred, t, noise_c, model.sched)
    if model.net_d:
        cond = x_c if model.net_c else np.zeros((x_d.shape[0], 0))
        logits = model.net_d.forward(x_d, cond, t).value
        if t >= 2:
            dist = categorical.reverse_dist_cat(x_d, logits, t, model.sched, model.sizes)
        else:
            dist = categorical.softmax_blocks(logits, model.sizes)
        next_d = categorical.sample_cat(dist, model.sizes, rng)
    return next_c, next_d


def sample(model: TwinModel, n: int, rng: np.random.Generator
           ) -> tuple[np.ndarray, np.ndarray]:
    """Draw n rows: start both chains at their priors and run the reverse
    processes in lockstep down to t = 1. Returns the continuous block and a
    one-hot discrete block (either may have zero width)."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    sum_k = int(sum(model.sizes))
    x_c = rng.standard_normal((n, model.schema.n_cont)) if model.net_c else np.zeros((n, 0))
    if model.net_d:
        x_d = categorical.sample_cat(categorical.uniform_probs(n, model.sizes),
                                     model.sizes, rng)
    else:
        x_d = np.zeros((n, 0))
    for t in range(model.sched.timesteps, 0, -1):
        x_c, x_d = reverse_pair_step(model, x_c, x_d, t, rng)
    return x_c, x_d


# ---------------------------------------------------------------------------
# checkpointing

def _enc_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()}


def _dec_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype="<f8").copy()
    expect = int(np.prod(d["shape"])) if d["shape"] else 1
    if arr.size != expect:
        raise CheckpointError(
            f"array payload holds {arr.size} values, dims say {expect}")
    return arr.reshape(d["shape"])


def _net_blob(net: nn.DiffusionMLP | None) -> dict | None:
    if net is None:
        return None
    return {"dims": net.dims(),
            "params": {k: _enc_array(p.value) for k, p in net.params().items()}}


def _opt_blob(opt: nn.AdamState | None) -> dict | None:
    if opt is None:
        return None
    return {"step": opt.step, "lr": opt.lr,
            "m": {k: _enc_array(v) for k, v in opt.m.items()},
            "v": {k: _enc_array(v) for k, v in opt.v.items()}}


def save_checkpoint(model: TwinModel, path: str) -> None:
    """Write the full model state (nets, optimizers, schedule, schema) as a
    JSON container; the write is atomic (temp file + rename)."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.hash(),
        "config": asdict(model.config),
        "steps_done": model.steps_done,
        "net_c": _net_blob(model.net_c),
        "net_d": _net_blob(model.net_d),
        "opt_c": _opt_blob(model.opt_c),
        "opt_d": _opt_blob(model.opt_d),
    }
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(blob, fh)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _restore_net(blob: dict | None, rng: np.random.Generator) -> nn.DiffusionMLP | None:
    if blob is None:
        return None
    dims = blob["dims"]
    net = nn.DiffusionMLP(dims["in_dim"], dims["cond_dim"], dims["out_dim"],
                          tuple(dims["hidden"]), dims["emb_dim"], rng)
    params = net.params()
    if set(params) != set(blob["params"]):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    for k, p in params.items():
        arr = _dec_array(blob["params"][k])
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"parameter {k}: checkpoint shape {arr.shape} != expected {p.value.shape}")
        p.value = arr
    return net


def _restore_opt(blob: dict | None, net: nn.DiffusionMLP | None) -> nn.AdamState | None:
    if blob is None or net is None:
        return None
    opt = nn.AdamState(net.params(), blob["lr"])
    opt.step = int(blob["step"])
    for k in opt.m:
        opt.m[k] = _dec_array(blob["m"][k])
        opt.v[k] = _dec_array(blob["v"][k])
    return opt


def load_checkpoint(path: str) -> TwinModel:
    """Rebuild a model from a checkpoint file, verifying the format version
    and that the stored schema hash matches the stored schema."""
    try:
        with open(path, encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {blob.get('format_version')!r}")
    schema = TableSchema.from_dict(blob["schema"])
    if schema.hash() != blob.get("schema_hash"):
        raise CheckpointError("schema hash mismatch: checkpoint is inconsistent")
    cfg_d = dict(blob["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    config = TrainConfig(**cfg_d)
    sched = linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    rng = substream(config.seed, "init")
    net_c = _restore_net(blob["net_c"], rng)
    net_d = _restore_net(blob["net_d"], rng)
    expected_sum_k = int(sum(schema.cat_sizes))
    if net_c is not None and (net_c.in_dim != schema.n_cont or net_c.cond_dim != expected_sum_k):
        raise CheckpointError("schema hash mismatch: continuous net dims do not fit the schema")
    if net_d is not None and (net_d.in_dim != expected_sum_k or net_d.cond_dim != schema.n_cont):
        raise CheckpointError("schema hash mismatch: discrete net dims do not fit the schema")
    model = TwinModel(schema, config, sched, net_c, net_d,
                      _restore_opt(blob["opt_c"], net_c),
                      _restore_opt(blob["opt_d"], net_d),
                      steps_done=int(blob["steps_done"]))
    return model
