"""Optimization loop, early stopping and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .corpus import (
    CorpusError,
    InteractionSequence,
    ItemCatalog,
    PaddedBatch,
    eval_inputs,
    history_matrix,
    iter_batches,
    trainable,
)
from .evaluation import batched_scores, rank_metrics
from .model import CDDRec
from .objective import (
    VARIANTS,
    LossBreakdown,
    StepLoss,
    cross_divergence_loss,
    cross_view_infonce,
    in_view_infonce,
    mse_loss,
    total_loss,
)
from .schedule import DiffusionSchedule, build_schedule

logger = logging.getLogger(__name__)

CKPT_HEADER = b"cddrec-ckpt v1"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# stream tags so every purpose draws from its own seed
_STREAMS = ("augment", "negatives", "diffusion", "prediction", "dropout", "steps")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainReport:
    epochs_run: int = 0
    best_epoch: int = 0
    best_valid_metric: float = float("-inf")
    loss_history: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    stopped_early: bool = False


def stream_seeds(seed: int, epoch: int, batch_index: int) -> dict[str, int]:
    state = np.random.SeedSequence([seed, epoch, batch_index]).generate_state(len(_STREAMS), dtype=np.uint64)
    return {name: int(s % (2**63)) for name, s in zip(_STREAMS, state)}


def torch_dtype(config: TrainConfig) -> torch.dtype:
    return torch.float64 if config.dtype == "float64" else torch.float32


def build_model(config: TrainConfig, item_count: int) -> CDDRec:
    model = CDDRec(
        item_count=item_count,
        d=config.hidden_size,
        max_len=config.max_len,
        T=config.num_steps,
        encoder=config.encoder,
        n_blocks=config.n_blocks,
        n_heads=config.n_heads,
        decoder_heads=config.decoder_heads,
        dropout=config.dropout,
        noise_scale_mode=config.noise_scale_mode,
        posterior_variance_mode=config.posterior_variance_mode,
        variance_floor=config.variance_floor,
    )
    return model.to(torch_dtype(config))


def make_optimizer(model: CDDRec, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def schedule_for(config: TrainConfig) -> DiffusionSchedule:
    return build_schedule(config.num_steps, config.beta_max, config.schedule_shape)


def sample_negatives(user_index: np.ndarray, shape: tuple[int, ...], seen: np.ndarray, rng: np.random.Generator):
    """Uniform items the user never interacted with; ``shape`` is (S, B, L)."""
    item_count = seen.shape[1] - 1
    users = np.broadcast_to(user_index[None, :, None], shape)
    out = rng.integers(1, item_count + 1, size=shape)
    bad = seen[users, out]
    while bad.any():
        out[bad] = rng.integers(1, item_count + 1, size=int(bad.sum()))
        bad = seen[users, out]
    return out


def compute_loss(
    model: CDDRec,
    batch: PaddedBatch,
    negatives: np.ndarray,
    schedule: DiffusionSchedule,
    config: TrainConfig,
    diffusion_gen: torch.Generator | None = None,
    prediction_gen: torch.Generator | None = None,
    steps: Sequence[int] | None = None,
) -> LossBreakdown:
    """Objective summed over ``steps`` (all of 0..T by default) for one batch.

    ``negatives[i]`` holds the negative items used at ``steps[i]``.
    """
    flags = VARIANTS[config.variant]
    steps = list(range(schedule.T + 1)) if steps is None else list(steps)
    input_ids = torch.as_tensor(batch.input_ids)
    target_ids = torch.as_tensor(batch.target_ids)
    nonpad = input_ids != 0
    sel = target_ids != 0
    B, L = input_ids.shape
    groups = None
    if config.negative_scope == "sequence":
        groups = torch.arange(B)[:, None].expand(B, L)

    e_s = model.encode(input_ids)
    if flags.cross_view:
        aug_ids = torch.as_tensor(batch.augmented_input_ids)
        aug_nonpad = aug_ids != 0
        e_aug = model.encode(aug_ids)
        cross_sel = sel & aug_nonpad

    zero = e_s.new_zeros(())
    items = []
    for i, t in enumerate(steps):
        mu = model.denoise_mean(e_s, t, nonpad)
        x_hat = model.sample_prediction(mu, t, schedule, prediction_gen, deterministic=config.no_denoising)
        x_t = model.diffuse_targets(target_ids, t, schedule, diffusion_gen, identity=config.no_diffusion)
        if flags.dissim == "cd":
            neg_ids = torch.as_tensor(negatives[i])
            x_neg = model.diffuse_targets(neg_ids, t, schedule, diffusion_gen, identity=config.no_diffusion)
            cd = cross_divergence_loss(x_hat[sel], x_t[sel], x_neg[sel])
        else:
            cd = mse_loss(x_hat[sel], x_t[sel])
        in_view = zero
        if flags.in_view and int(sel.sum()) >= 2:
            in_view = in_view_infonce(x_hat[sel], x_t[sel], config.tau, None if groups is None else groups[sel])
        cross_view = zero
        if flags.cross_view and int(cross_sel.sum()) >= 2:
            mu_aug = model.denoise_mean(e_aug, t, aug_nonpad)
            x_tilde = model.sample_prediction(mu_aug, t, schedule, prediction_gen, deterministic=config.no_denoising)
            cross_view = cross_view_infonce(
                x_hat[cross_sel], x_tilde[cross_sel], config.tau, None if groups is None else groups[cross_sel]
            )
        items.append(StepLoss(t, cd, in_view, cross_view))
    return total_loss(items, config.lambda_cl, config.tau, flags, T=schedule.T)


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def train_step(
    model: CDDRec,
    optimizer: torch.optim.Optimizer,
    batch: PaddedBatch,
    schedule: DiffusionSchedule,
    config: TrainConfig,
    seen: np.ndarray,
    seeds: dict[str, int],
) -> LossBreakdown:
    """One forward over every diffusion step, backward, clip, Adam update."""
    if config.step_subsample and config.step_subsample < schedule.T + 1:
        pick = np.random.default_rng(seeds["steps"]).choice(schedule.T + 1, config.step_subsample, replace=False)
        steps = sorted(int(t) for t in pick)
    else:
        steps = list(range(schedule.T + 1))
    negatives = sample_negatives(
        batch.user_index, (len(steps),) + batch.target_ids.shape, seen, np.random.default_rng(seeds["negatives"])
    )
    torch.manual_seed(seeds["dropout"])
    model.train()
    optimizer.zero_grad(set_to_none=True)
    breakdown = compute_loss(
        model,
        batch,
        negatives,
        schedule,
        config,
        _generator(seeds["diffusion"]),
        _generator(seeds["prediction"]),
        steps,
    )
    breakdown.objective.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    model.zero_padding_row()
    breakdown.objective = breakdown.objective.detach()
    return breakdown


class EarlyStopping:
    """Tracks the best metric; stops once ``patience`` epochs pass without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs > self.patience

    @property
    def patience_left(self) -> int:
        return self.patience - self.bad_epochs


def validation_mrr(model: CDDRec, sequences: Sequence[InteractionSequence], config: TrainConfig, split="valid") -> float:
    histories, targets = eval_inputs(sequences, split, config.max_len)
    scores = batched_scores(model, histories, config.t_infer, config.eval_batch_size)
    return rank_metrics(scores, targets)[2]


def fit(
    sequences: Sequence[InteractionSequence],
    catalog: ItemCatalog,
    config: TrainConfig,
    run_dir=None,
    validate: Callable[[CDDRec, int], float] | None = None,
    resume=None,
) -> tuple[CDDRec, TrainReport]:
    """Train until validation MRR stalls for ``patience`` epochs; returns the best state.

    ``validate(model, epoch)`` replaces the default validation-MRR monitor.
    ``resume`` is a checkpoint path to continue from.
    """
    if not sequences or not trainable(sequences):
        raise CorpusError("empty corpus: nothing to train on")
    start = time.perf_counter()
    torch.manual_seed(config.seed)
    model = build_model(config, catalog.item_count)
    optimizer = make_optimizer(model, config)
    schedule = schedule_for(config)
    seen = history_matrix(sequences, catalog.item_count)
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    first_epoch = 1
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["state_dict"])
        optimizer.load_state_dict(ckpt["optimizer"])
        stopper.best, stopper.best_epoch, stopper.bad_epochs = ckpt["best_metric"], ckpt["best_epoch"], ckpt["bad_epochs"]
        first_epoch = ckpt["epoch"] + 1
    best_state = copy.deepcopy(model.state_dict())
    validate = validate or (lambda m, _epoch: validation_mrr(m, sequences, config))

    run_dir = Path(run_dir) if run_dir is not None else None
    epoch_log = loss_log = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        epoch_log = (run_dir / "epochs.log").open("a", encoding="utf-8")
        loss_log = (run_dir / "losses.tsv").open("a", encoding="utf-8")
        if first_epoch == 1:
            epoch_log.write("# epoch\ttrain_total\tvalid_MRR\tbest_MRR\tpatience_left\n")
            loss_log.write("# epoch\tt\tcd\tin\tcross\ttotal\n")

    try:
        for epoch in range(first_epoch, config.max_epochs + 1):
            order_rng = np.random.default_rng([config.seed, epoch, 0x5EED])
            totals, per_step = [], []
            batches = iter_batches(
                sequences,
                config.batch_size,
                config.max_len,
                order_rng,
                lambda i, e=epoch: np.random.default_rng(stream_seeds(config.seed, e, i)["augment"]),
                config.augment_ratios,
                augment_views=VARIANTS[config.variant].cross_view,
            )
            for i, batch in enumerate(batches):
                breakdown = train_step(model, optimizer, batch, schedule, config, seen, stream_seeds(config.seed, epoch, i))
                totals.append(breakdown.total)
                per_step.append(breakdown.per_step)
            mean_total = float(np.mean(totals))
            metric = float(validate(model, epoch))
            if stopper.update(epoch, metric):
                best_state = copy.deepcopy(model.state_dict())
                if run_dir is not None:
                    save_checkpoint(run_dir / "best.ckpt", model, optimizer, config, epoch, stopper)
            report.epochs_run = epoch
            step_means = np.mean(np.asarray(per_step), axis=0)
            report.loss_history.append({"epoch": epoch, "total": mean_total, "per_step": step_means.tolist(), "valid": metric})
            line = f"{epoch}\t{mean_total:.6f}\t{metric:.6f}\t{stopper.best:.6f}\t{stopper.patience_left}"
            logger.info(line)
            if epoch_log is not None:
                epoch_log.write(line + "\n")
                epoch_log.flush()
                steps = range(schedule.T + 1) if len(step_means) == schedule.T + 1 else range(len(step_means))
                for t, (cd, inv, crs) in zip(steps, step_means):
                    loss_log.write(f"{epoch}\t{t}\t{cd:.6f}\t{inv:.6f}\t{crs:.6f}\t{mean_total:.6f}\n")
                loss_log.flush()
            if stopper.should_stop:
                report.stopped_early = True
                break
    finally:
        if epoch_log is not None:
            epoch_log.close()
            loss_log.close()

    model.load_state_dict(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_valid_metric = stopper.best
    report.wall_time = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: CDDRec, optimizer, config: TrainConfig, epoch: int, stopper: EarlyStopping | None = None):
    """Header line, sha256 line, then the torch-serialized payload."""
    payload = {
        "config": dataclasses.asdict(config),
        "item_count": model.item_count,
        "schedule": (config.num_steps, config.beta_max, config.schedule_shape),
        "parameter_order": [name for name, _ in model.named_parameters()],
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "best_metric": stopper.best if stopper else float("-inf"),
        "best_epoch": stopper.best_epoch if stopper else 0,
        "bad_epochs": stopper.bad_epochs if stopper else 0,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest().encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CKPT_HEADER + b"\n" + digest + b"\n" + body)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    header, _, rest = raw.partition(b"\n")
    if header != CKPT_HEADER:
        raise CheckpointError(f"{path}: not a checkpoint (expected header {CKPT_HEADER.decode()!r})")
    digest, _, body = rest.partition(b"\n")
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return torch.load(io.BytesIO(body), weights_only=False)


def restore(path) -> tuple[CDDRec, torch.optim.Optimizer, TrainConfig, dict]:
    """Rebuild model, optimizer and config from a checkpoint file."""
    ckpt = load_checkpoint(path)
    config = TrainConfig(**ckpt["config"])
    model = build_model(config, ckpt["item_count"])
    model.load_state_dict(ckpt["state_dict"])
    optimizer = make_optimizer(model, config)
    if ckpt["optimizer"] is not None:
        optimizer.load_state_dict(ckpt["optimizer"])
    return model, optimizer, config, ckpt
