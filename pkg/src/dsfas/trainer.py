"""Two-stage training: live autoencoder first, then disentanglement."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, resample_balanced
from .losses import (
    LIVE,
    SPOOF,
    BatchFeatures,
    LossWeights,
    TripletConfig,
    combined_loss,
    l_c,
    l_dis,
    l_gen,
    l_live,
    l_r,
    l_recon,
    l_t,
)
from .models import Checkpoint, ParamSet, build_network, forward, fuse_latents, network_spec
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

ABLATIONS = (
    "disable_stage1",
    "disable_discriminator",
    "disable_aux_classifier",
    "disable_triplet",
    "normal_triplet_only",
)
STAGE2_COLUMNS = ("l_recon", "l_gen", "l_dis", "l_t", "l_r", "l_c")


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 32
    latent_channels: int = 16
    width: int = 16
    batch_size: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    disc_switch_k: int = 1
    weights: LossWeights = LossWeights()
    triplet: TripletConfig = TripletConfig()
    seed: int = 0
    disable_stage1: bool = False
    disable_discriminator: bool = False
    disable_aux_classifier: bool = False
    disable_triplet: bool = False
    normal_triplet_only: bool = False

    def __post_init__(self):
        if not (self.lr > 0 and self.eps > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer rates must be positive and betas in [0, 1)")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4 for triplet mining")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.disc_switch_k < 1:
            raise ValueError("epoch counts must be >= 0 and disc_switch_k >= 1")
        network_spec("live_encoder", self.image_size, self.latent_channels, self.width)

    @property
    def arch(self) -> dict:
        return {
            "image_size": self.image_size,
            "latent_channels": self.latent_channels,
            "width": self.width,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("triplet"), dict):
            d["triplet"] = TripletConfig(**d["triplet"])
        return cls(**d)


@dataclass
class TrainLog:
    stage: str
    initial: dict = field(default_factory=dict)  # evaluation before any update
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    batch_ids: list[list[str]] = field(default_factory=list)

    def columns(self) -> list[str]:
        if self.stage == "stage1":
            return ["epoch", "l_live", "seconds"]
        present = [c for c in STAGE2_COLUMNS if any(c in r for r in self.epochs)]
        return ["epoch", *present, "combined", "disc_acc", "seconds"]

    def to_csv(self) -> str:
        """One row per completed epoch; disabled components have no column."""
        cols = self.columns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for rec in self.epochs:
            writer.writerow([_fmt(rec.get(c, "")) for c in cols])
        return buf.getvalue()

    def seen_attack_types(self, dataset: Dataset) -> set[str]:
        by_id = {s.id: s.attack_type for s in dataset}
        return {by_id[i] for ids in self.batch_ids for i in ids}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update of the trainable tensors of ``params``."""
    trainable = [k for k in params if params.trainable[k]]
    unknown = set(grads) - set(trainable)
    if unknown:
        raise ValueError(f"gradients for non-trainable or unknown parameters: {sorted(unknown)}")
    b1, b2 = betas
    t = state.t + 1
    new_m, new_v, values = dict(state.m), dict(state.v), {}
    for k in trainable:
        p = params[k]
        g = grads.get(k)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {params.name}.{k}")
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        values[k] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return params.replace(values), AdamState(new_m, new_v, t)


def _named_grads(params: ParamSet, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: grads[t] for k, t in params.params.items() if params.trainable[k] and t in grads}


class _Optim:
    """Adam bookkeeping for one network."""

    def __init__(self, params: ParamSet, cfg: TrainConfig):
        self.params = params
        self.state = AdamState()
        self.cfg = cfg

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.params, self.state = adam_step(
            self.params,
            _named_grads(self.params, grads),
            self.state,
            self.cfg.lr,
            (self.cfg.beta1, self.cfg.beta2),
            self.cfg.eps,
        )


# ---------------------------------------------------------------------------
# batching


def batch_iterator(data: Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Stratified batches for one epoch, deterministic in (seed, epoch).

    Each batch takes ceil(B/2) live and floor(B/2) spoof samples.  Samples
    left over once either class runs out are dropped for this epoch; for a
    balanced dataset and even B that remainder is smaller than B.
    """
    labels = data.labels
    live = np.flatnonzero(labels == LIVE)
    spoof = np.flatnonzero(labels == SPOOF)
    n_live, n_spoof = (batch_size + 1) // 2, batch_size // 2
    n_batches = min(len(live) // n_live, len(spoof) // n_spoof)
    if n_batches == 0:
        raise ValueError(
            f"batch size {batch_size} needs >= {n_live} live and >= {n_spoof} spoof samples, "
            f"have {len(live)} and {len(spoof)}"
        )
    rng = np.random.default_rng([seed, epoch, 0xB47C])
    live = rng.permutation(live)
    spoof = rng.permutation(spoof)
    batches = []
    for b in range(n_batches):
        idx = np.concatenate(
            [live[b * n_live : (b + 1) * n_live], spoof[b * n_spoof : (b + 1) * n_spoof]]
        )
        batches.append(rng.permutation(idx))
    return batches


def _plain_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0x57A1]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# stage 1


def _eval_l_live(enc_spec, enc, dec_spec, dec, images: np.ndarray, chunk: int = 64) -> float:
    total = 0.0
    for i in range(0, len(images), chunk):
        x = Tensor(images[i : i + chunk])
        recon = forward(dec_spec, dec, forward(enc_spec, enc, x))
        total += l_live(x, recon).item() * len(x)
    return total / len(images)


def train_stage1(
    cfg: TrainConfig, live_data: Dataset, on_epoch: Callable[[dict], None] | None = None
) -> tuple[Checkpoint, TrainLog]:
    """Fit the live autoencoder on live images only."""
    # overflow surfaces as NonFiniteError -> DivergenceError; numpy's own warning is noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _train_stage1(cfg, live_data, on_epoch)


def _train_stage1(cfg, live_data, on_epoch):
    if any(not s.is_live for s in live_data):
        raise ValueError("stage 1 trains on live samples only; spoof sample found")
    if len(live_data) == 0:
        raise ValueError("stage 1 needs at least one live sample")
    enc_spec, enc = build_network("live_encoder", cfg.image_size, cfg.latent_channels, cfg.seed, cfg.width)
    dec_spec, dec = build_network("live_decoder", cfg.image_size, cfg.latent_channels, cfg.seed, cfg.width)
    opt_enc, opt_dec = _Optim(enc, cfg), _Optim(dec, cfg)
    images = live_data.images()
    ids = live_data.ids
    tlog = TrainLog("stage1")
    tlog.initial = {"epoch": 0, "l_live": _eval_l_live(enc_spec, enc, dec_spec, dec, images)}

    for epoch in range(1, cfg.stage1_epochs + 1):
        start = time.perf_counter()
        for step, idx in enumerate(_plain_batches(len(images), cfg.batch_size, cfg.seed, epoch)):
            x = Tensor(images[idx])
            try:
                with Tape() as tape:
                    loss = l_live(x, forward(dec_spec, opt_dec.params, forward(enc_spec, opt_enc.params, x)))
                grads = tape.backward(loss)
                opt_enc.step(grads)
                opt_dec.step(grads)
            except (NonFiniteError, DivergenceError) as exc:
                raise DivergenceError(f"stage 1 diverged at epoch {epoch} step {step}: {exc}") from exc
            tlog.steps.append({"epoch": epoch, "step": step, "l_live": loss.item()})
            tlog.batch_ids.append([ids[i] for i in idx])
        rec = {
            "epoch": epoch,
            "l_live": _eval_l_live(enc_spec, opt_enc.params, dec_spec, opt_dec.params, images),
            "seconds": time.perf_counter() - start,
        }
        tlog.epochs.append(rec)
        log.info("stage1 epoch %d l_live=%.5f", epoch, rec["l_live"])
        if on_epoch:
            on_epoch(rec)

    ckpt = Checkpoint(
        "stage1",
        {"E_L": opt_enc.params, "D_L": opt_dec.params},
        cfg.arch,
        config=cfg.to_dict(),
        seed=cfg.seed,
        epoch=cfg.stage1_epochs,
    )
    return ckpt, tlog


# ---------------------------------------------------------------------------
# stage 2


def _build(role: str, cfg: TrainConfig, offset: int) -> ParamSet:
    return build_network(role, cfg.image_size, cfg.latent_channels, cfg.seed + offset, cfg.width)[1]


def stage2_networks(cfg: TrainConfig, stage1_ckpt: Checkpoint | None) -> dict[str, ParamSet]:
    """Initial stage-2 parameters; E_L is always frozen."""
    if cfg.disable_stage1:
        live_enc, live_dec = _build("live_encoder", cfg, 1000), _build("live_decoder", cfg, 1000)
    else:
        if stage1_ckpt is None:
            raise ValueError("stage 2 needs a stage-1 checkpoint unless disable_stage1 is set")
        stage1_ckpt.require_stage("stage1")
        if stage1_ckpt.arch != cfg.arch:
            raise ValueError(f"stage-1 architecture {stage1_ckpt.arch} differs from config {cfg.arch}")
        live_enc, live_dec = stage1_ckpt.networks["E_L"], stage1_ckpt.networks["D_L"]
    return {
        "E_L": live_enc.frozen(),
        "D_L": live_dec,
        "E_S": _build("spoof_encoder", cfg, 2),
        "D_syn": _build("synth_decoder", cfg, 3),
        "D": _build("discriminator", cfg, 4),
        "D_map": _build("map_decoder", cfg, 5),
        "C_aux": _build("aux_classifier", cfg, 6),
    }


def _specs(cfg: TrainConfig) -> dict:
    from .models import ROLE_OF

    return {n: network_spec(r, cfg.image_size, cfg.latent_channels, cfg.width) for n, r in ROLE_OF.items()}


def generator_losses(cfg: TrainConfig, specs: dict, nets: dict[str, ParamSet], x: Tensor, y: np.ndarray):
    """Forward pass of the generator side; returns (components, extras).

    ``components`` maps l_recon/l_gen/l_t/l_r/l_c to tensors, with ``None``
    for components switched off by the config.
    """
    f_live = forward(specs["E_L"], nets["E_L"], x)
    f_spoof = forward(specs["E_S"], nets["E_S"], x)
    x_syn = forward(specs["D_syn"], nets["D_syn"], fuse_latents(f_live, f_spoof))
    spoof_map, taps = forward(specs["D_map"], nets["D_map"], f_spoof, return_taps=True)

    comps = {"l_recon": l_recon(x, x_syn), "l_gen": None, "l_t": None, "l_r": None, "l_c": None}
    if not cfg.disable_discriminator:
        d_fake = T.sigmoid(forward(specs["D"], nets["D"].frozen(), x_syn))
        comps["l_gen"] = l_gen(d_fake)
    if not cfg.disable_triplet:
        feats = [BatchFeatures(T.mean(tap, axes=(2, 3)), y) for tap in taps]
        comps["l_t"] = l_t(feats, cfg.triplet, normal_only=cfg.normal_triplet_only)
    live_idx = np.flatnonzero(y == LIVE)
    comps["l_r"] = l_r(T.take(spoof_map, live_idx))
    if not cfg.disable_aux_classifier:
        logits = forward(specs["C_aux"], nets["C_aux"], T.concat([x, spoof_map], axis=1))
        comps["l_c"] = l_c(y, T.sigmoid(logits))
    return comps, {"x_syn": x_syn, "spoof_map": spoof_map}


def train_stage2(
    cfg: TrainConfig,
    stage1_ckpt: Checkpoint | None,
    train_data: Dataset,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Disentanglement stage on live + spoof data with E_L frozen."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _train_stage2(cfg, stage1_ckpt, train_data, on_epoch)


def _train_stage2(cfg, stage1_ckpt, train_data, on_epoch):
    if len(train_data.live()) == 0 or len(train_data.spoof()) == 0:
        raise ValueError("stage 2 needs both live and spoof samples")
    nets = stage2_networks(cfg, stage1_ckpt)
    specs = _specs(cfg)
    trainable = ["E_S", "D_syn", "D_map"] + ([] if cfg.disable_aux_classifier else ["C_aux"])
    opts = {n: _Optim(nets[n], cfg) for n in trainable}
    opt_d = None if cfg.disable_discriminator else _Optim(nets["D"], cfg)

    balanced = resample_balanced(train_data, cfg.seed)
    images, labels, ids = balanced.images(), balanced.labels, balanced.ids
    tlog = TrainLog("stage2")

    for epoch in range(1, cfg.stage2_epochs + 1):
        start = time.perf_counter()
        step_recs = []
        live_scores, spoof_scores = [], []
        for step, idx in enumerate(batch_iterator(balanced, cfg.batch_size, cfg.seed, epoch)):
            x, y = Tensor(images[idx]), labels[idx]
            current = dict(nets)
            current.update({n: o.params for n, o in opts.items()})
            if opt_d is not None:
                current["D"] = opt_d.params
            try:
                with Tape() as tape:
                    comps, extras = generator_losses(cfg, specs, current, x, y)
                    total = combined_loss(**comps, w=cfg.weights)
                grads = tape.backward(total)
                for o in opts.values():
                    o.step(grads)
                rec = {"epoch": epoch, "step": step}
                rec.update({k: v.item() for k, v in comps.items() if v is not None})
                rec["combined"] = total.item()

                if opt_d is not None and (step + 1) % cfg.disc_switch_k == 0:
                    x_fake = extras["x_syn"].detach()
                    with Tape() as tape:
                        d_real = T.sigmoid(forward(specs["D"], opt_d.params, x))
                        d_fake = T.sigmoid(forward(specs["D"], opt_d.params, x_fake))
                        loss_d = l_dis(d_real, d_fake)
                    opt_d.step(tape.backward(loss_d))
                    rec["l_dis"] = loss_d.item()
                    rec["disc_acc"] = float(
                        (np.sum(d_real.data > 0.5) + np.sum(d_fake.data <= 0.5)) / (2 * len(idx))
                    )
            except (NonFiniteError, DivergenceError) as exc:
                raise DivergenceError(f"stage 2 diverged at epoch {epoch} step {step}: {exc}") from exc

            scores = extras["spoof_map"].data.mean(axis=(1, 2, 3))
            live_scores.extend(scores[y == LIVE])
            spoof_scores.extend(scores[y == SPOOF])
            step_recs.append(rec)
            tlog.steps.append(rec)
            tlog.batch_ids.append([ids[i] for i in idx])

        tlog.epochs.append(_epoch_record(cfg, epoch, step_recs, live_scores, spoof_scores, start))
        log.info("stage2 epoch %d combined=%.5f", epoch, tlog.epochs[-1]["combined"])
        if on_epoch:
            on_epoch(tlog.epochs[-1])

    final = dict(nets)
    final.update({n: o.params for n, o in opts.items()})
    if opt_d is not None:
        final["D"] = opt_d.params
    ckpt = Checkpoint("stage2", final, cfg.arch, config=cfg.to_dict(), seed=cfg.seed, epoch=cfg.stage2_epochs)
    return ckpt, tlog


def _epoch_record(cfg, epoch, step_recs, live_scores, spoof_scores, start) -> dict:
    rec: dict = {"epoch": epoch}
    for col in STAGE2_COLUMNS:
        vals = [r[col] for r in step_recs if col in r]
        if vals:
            rec[col] = float(np.mean(vals))
    rec["combined"] = float(
        combined_loss(*(rec.get(c) for c in ("l_recon", "l_gen", "l_t", "l_r", "l_c")), w=cfg.weights)
    )
    accs = [r["disc_acc"] for r in step_recs if "disc_acc" in r]
    rec["disc_acc"] = float(np.mean(accs)) if accs else ""
    rec["live_score"] = float(np.mean(live_scores))
    rec["spoof_score"] = float(np.mean(spoof_scores))
    rec["seconds"] = time.perf_counter() - start
    return rec
