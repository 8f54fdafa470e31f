"""Decoupled self-supervised training at toy scale.

Each iteration has two phases.

Energy phase
    A bank pose ``p_z`` seen by a random camera is rendered by the decoder
    with the source frame's appearance, then re-encoded. The pose energy
    compares the re-encoded pose with ``p_z`` and the appearance energy
    compares the two appearance grids. Odd iterations update only the
    encoder on these energies, even iterations only the decoder.

Consistency phase
    The target frame's predicted pose drives the puppet; the decoder
    rebuilds the target from the source appearance (uncertain
    reconstruction), matches its segmentation head to the puppet's labels
    (segmentation consistency), and renders ``p_z`` from both appearance
    grids, which must agree on the foreground and show the flat backdrop
    elsewhere (certain reconstruction). Encoder and decoder update jointly.

Every loss owns an Adagrad accumulator per network it updates, and all
updates of one phase use gradients taken at the same parameters.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import losses
from ..camera import CameraBounds, CameraParams, camera_points, project, sample_camera
from ..config import CameraConfig, LossConfig, PuppetConfig, SelfSupConfig
from ..errors import ConfigError, InvalidInputError, NumericError
from ..geometry import Skeleton, bone_lengths
from ..io import PoseBank, default_pose_bank, pose_bank_from_world
from ..metrics import MetricReport, mpjpe_pa, seg_f1
from ..posebank import synthesize_world_poses
from ..puppet import PartDictionary, default_dictionary, hard_segmentation, maps_from_projection
from .nets import Decoder, Encoder
from .synth import Corpus, SynthConfig, generate_corpus

ABLATIONS = ("qz", "msal", "fk")
ADAGRAD_EPS = 1e-8
ENERGY_LOSSES = ("pose", "appearance")
CONSISTENCY_LOSSES = ("uncertain", "certain", "seg")


def adagrad_update(params: torch.Tensor, grad: torch.Tensor, accumulator: torch.Tensor, lr: float,
                   eps: float = ADAGRAD_EPS):
    """One Adagrad step: ``acc += g^2``, ``params -= lr * g / (sqrt(acc) + eps)``.

    Pure function; returns ``(params', accumulator')``.
    """
    if params.shape != grad.shape or grad.shape != accumulator.shape:
        raise InvalidInputError("params, grad and accumulator must share a shape")
    acc = accumulator + grad * grad
    return params - lr * grad / (acc.sqrt() + eps), acc


def _apply_adagrad(params: list, grads: list, accs: list, lr: float) -> None:
    """In-place :func:`adagrad_update` over matching lists; ``None`` grads are skipped."""
    with torch.no_grad():
        for p, g, a in zip(params, grads, accs):
            if g is None:
                continue
            a.add_(g * g)
            p.sub_(lr * g / (a.sqrt() + ADAGRAD_EPS))


def toy_bounds(cfg: SelfSupConfig, camera: CameraConfig | None = None) -> CameraBounds:
    return cfg.camera_bounds(camera or CameraConfig())


@dataclass
class TrainState:
    """Iteration counter, per-loss accumulators and the seed of the run."""

    iteration: int
    accumulators: dict
    seed: int

    def check(self) -> None:
        for name, accs in self.accumulators.items():
            if any(bool((a < 0).any()) for a in accs):
                raise NumericError(f"accumulator {name} has negative entries")


@dataclass
class StepLog:
    iteration: int
    losses: dict

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.losses.values())


class Trainer:
    """Encoder, decoder and the decoupled schedule over a :class:`Corpus`.

    Parameters
    ----------
    ablate : ``None`` or one of ``"qz"`` (drop every loss that uses bank
        poses), ``"msal"`` (drop the saliency term of the uncertain
        reconstruction) and ``"fk"`` (regress joints directly).
    """

    def __init__(self, corpus: Corpus, cfg: SelfSupConfig | None = None, *, seed: int = 0,
                 ablate: str | None = None, bank: PoseBank | None = None,
                 dictionary: PartDictionary | None = None, loss_cfg: LossConfig | None = None,
                 camera: CameraConfig | None = None, f: float = 1.2):
        if ablate is not None and ablate not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        self.cfg = cfg or SelfSupConfig()
        if self.cfg.steps < 0 or self.cfg.batch < 1:
            raise ConfigError("selfsup.steps must be >= 0 and selfsup.batch >= 1")
        self.corpus = corpus
        self.ablate = ablate
        self.loss_cfg = loss_cfg or LossConfig()
        self.bank = bank or default_pose_bank()
        self.dictionary = (dictionary or default_dictionary()).to(torch.float32)
        self.skeleton: Skeleton = self.dictionary.skeleton
        self.bounds = toy_bounds(self.cfg, camera)
        self.f = f
        self.puppet = PuppetConfig(sampling="bilinear")
        self.rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        c = self.cfg
        self.encoder = Encoder(self.skeleton, self.bounds, c.width, c.appearance_channels, c.appearance_grid,
                               c.resolution, direct=ablate == "fk")
        self.decoder = Decoder(self.skeleton.L, c.appearance_channels, c.width, c.appearance_grid, c.resolution)
        accs = {}
        for name in ENERGY_LOSSES:
            accs[f"{name}/E"] = [torch.zeros_like(p) for p in self.encoder.parameters()]
            accs[f"{name}/D"] = [torch.zeros_like(p) for p in self.decoder.parameters()]
        for name in CONSISTENCY_LOSSES:
            accs[name] = [torch.zeros_like(p) for p in self.parameters()]
        self.state = TrainState(0, accs, seed)
        self.bg = torch.tensor(self.loss_cfg.bg_color, dtype=torch.float32)

    def parameters(self) -> list:
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    # ------------------------------------------------------------ rendering

    def render(self, pose: torch.Tensor, camera: torch.Tensor):
        """Part maps of a batch of canonical poses under ``(B, 6)`` cameras."""
        q, qd = project(pose, CameraParams(camera), self.f, check=False)
        return maps_from_projection(q, qd, self.dictionary, self.puppet, self.cfg.resolution)

    def sample_bank(self, n: int):
        """``n`` bank poses with cameras drawn inside the toy bounds."""
        idx = self.rng.integers(0, len(self.bank), size=n)
        poses = self.bank.canonical[idx]
        cams = torch.stack([sample_camera(self.rng, self.bounds, p, self.f).vector for p in poses])
        return poses.float(), cams.float()

    def batch(self) -> dict:
        """A random training batch with the augmentations applied to both frames."""
        idx = torch.from_numpy(self.rng.integers(0, len(self.corpus), size=self.cfg.batch))
        I_s, I_t, m = self.corpus.I_s[idx].float(), self.corpus.I_t[idx].float(), self.corpus.m_sal[idx].float()
        if self.cfg.augment:
            flip = torch.from_numpy(self.rng.random(len(idx)) < 0.5)
            I_s = torch.where(flip[:, None, None, None], I_s.flip(-1), I_s)
            I_t = torch.where(flip[:, None, None, None], I_t.flip(-1), I_t)
            m = torch.where(flip[:, None, None], m.flip(-1), m)
            gain = torch.from_numpy(self.rng.uniform(0.8, 1.2, len(idx))).float()[:, None, None, None]
            shift = torch.from_numpy(self.rng.uniform(-0.1, 0.1, len(idx))).float()[:, None, None, None]
            I_s = ((I_s - 0.5) * gain + 0.5 + shift).clamp(0.0, 1.0)
            I_t = ((I_t - 0.5) * gain + 0.5 + shift).clamp(0.0, 1.0)
        return {"I_s": I_s, "I_t": I_t, "m_sal": m}

    # ------------------------------------------------------------ phases

    def pose_targets(self, pose: torch.Tensor, camera: torch.Tensor) -> torch.Tensor:
        """Canonical joints stacked with camera-frame joints, ``(B, 2J, 3)``."""
        return torch.cat([pose, camera_points(pose, CameraParams(camera))], dim=-2)

    def energy_losses(self, batch: dict, z: tuple) -> dict:
        p_z, c_z = z
        maps_z = self.render(p_z, c_z)
        enc_s = self.encoder(batch["I_s"])
        I_z, _ = self.decoder(enc_s.a, maps_z.phi_bar.detach())
        enc_z = self.encoder(I_z)
        return {
            "pose": losses.energy_pose(self.pose_targets(p_z, c_z), self.pose_targets(enc_z.pose, enc_z.camera)),
            "appearance": losses.energy_appearance(enc_s.a, enc_z.a),
        }

    def energy_step(self, batch: dict, z: tuple) -> dict:
        """Update the encoder (odd iteration) or the decoder (even) on both energies."""
        net, tag, lr = (self.encoder, "E", self.cfg.lr_energy)
        if self.state.iteration % 2 == 0:
            net, tag = self.decoder, "D"
        params = list(net.parameters())
        vals = self.energy_losses(batch, z)
        grads = {k: torch.autograd.grad(v, params, retain_graph=True, allow_unused=True) for k, v in vals.items()}
        for k, g in grads.items():
            _apply_adagrad(params, g, self.state.accumulators[f"{k}/{tag}"], lr)
        return {f"energy_{k}": float(v.detach()) for k, v in vals.items()}

    def consistency_losses(self, batch: dict, z: tuple | None) -> dict:
        B = batch["I_t"].shape[0]
        enc = self.encoder(torch.cat([batch["I_s"], batch["I_t"]]))
        a_s, a_t = enc.a[:B], enc.a[B:]
        maps_t = self.render(enc.pose[B:], enc.camera[B:])
        I_hat, y_hat = self.decoder(a_s, maps_t.phi_bar)
        m_sal = torch.zeros_like(batch["m_sal"]) if self.ablate == "msal" else batch["m_sal"]
        out = {
            "uncertain": losses.recon_uncertain(I_hat, batch["I_t"], y_hat[:, -1], m_sal, self.loss_cfg.beta),
            "seg": losses.seg_consistency(y_hat, hard_segmentation(maps_t.phi_bar.detach()),
                                          maps_t.w_unc.detach()),
        }
        if z is not None:
            maps_z = self.render(*z)
            phi_z = maps_z.phi_bar.detach()
            I_z, _ = self.decoder(enc.a, torch.cat([phi_z, phi_z]))
            I_zs, I_zt = I_z[:B], I_z[B:]
            out["certain"] = losses.recon_certain(I_zs, I_zt, maps_z.w_fg.detach(), self.bg)
        return out

    def consistency_step(self, batch: dict, z: tuple | None) -> dict:
        params = self.parameters()
        vals = self.consistency_losses(batch, z)
        grads = {k: torch.autograd.grad(v, params, retain_graph=True, allow_unused=True) for k, v in vals.items()}
        for k, g in grads.items():
            _apply_adagrad(params, g, self.state.accumulators[k], self.cfg.lr_consistency)
        return {k: float(v.detach()) for k, v in vals.items()}

    def train_step(self, batch: dict | None = None) -> StepLog:
        """One iteration of the schedule.

        Raises
        ------
        NumericError
            If any loss is not finite; the message lists every loss value.
        """
        batch = batch or self.batch()
        self.state.iteration += 1
        z = None if self.ablate == "qz" else self.sample_bank(batch["I_t"].shape[0])
        logged = {}
        if z is not None:
            logged.update(self.energy_step(batch, z))
        logged.update(self.consistency_step(batch, z))
        log = StepLog(self.state.iteration, logged)
        if not log.finite():
            raise NumericError(f"non-finite loss at iteration {log.iteration}: {json.dumps(logged)}")
        return log

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def predict(self, images: torch.Tensor, chunk: int = 64):
        """Canonical poses ``(N, J, 3)`` and cameras ``(N, 6)`` for a stack of images."""
        poses, cams = [], []
        for i in range(0, images.shape[0], chunk):
            enc = self.encoder(images[i : i + chunk].float())
            poses.append(enc.pose)
            cams.append(enc.camera)
        return torch.cat(poses), torch.cat(cams)


@dataclass
class EvalReport:
    """Held-out quality of an encoder."""

    mpjpe: MetricReport
    bone_violation: float
    fg_f1: float
    part_f1: float

    def to_dict(self) -> dict:
        return {"mpjpe_pa": self.mpjpe.mean, "bone_violation": self.bone_violation, "fg_f1": self.fg_f1,
                "part_f1": self.part_f1}


@torch.no_grad()
def evaluate(trainer: Trainer, heldout: Corpus) -> EvalReport:
    """Aligned joint error, bone-length deviation and segmentation F1 on target frames."""
    poses, cams = trainer.predict(heldout.I_t)
    gt = heldout.pose_t
    errors = [mpjpe_pa(p.double().numpy(), g.numpy()) for p, g in zip(poses, gt)]
    s = trainer.skeleton
    ref = bone_lengths(torch.as_tensor(s.template_pose), s).float()
    viol = float(((bone_lengths(poses, s) - ref).abs() / ref).mean())
    labels = hard_segmentation(trainer.render(poses, cams).phi_bar).numpy()
    bg = s.L + 1
    f1 = [seg_f1(p, g, bg) for p, g in zip(labels, heldout.labels_t.numpy())]
    fg = float(np.mean([a for a, _ in f1]))
    part = float(np.nanmean([b for _, b in f1]))
    return EvalReport(MetricReport("mpjpe_pa", errors), viol, fg, part)


@dataclass
class RunResult:
    """Outcome of :func:`run`: logs, held-out scores and the trained trainer."""

    trainer: Trainer
    logs: list
    report: EvalReport
    baseline: EvalReport
    wall_time: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ablate": self.trainer.ablate, "seed": self.trainer.state.seed, "steps": self.trainer.state.iteration,
                "wall_time": self.wall_time, "report": self.report.to_dict(), "baseline": self.baseline.to_dict(),
                "final_losses": self.logs[-1].losses if self.logs else {}}


def make_corpora(cfg: SelfSupConfig, seed: int, dictionary: PartDictionary | None = None,
                 camera: CameraConfig | None = None):
    """Training and held-out corpora from a pose bank disjoint from the training bank.

    The subject poses come from a freshly synthesized bank seeded by
    ``seed``, so they are unpaired with the shipped bank used for ``p_z``.
    """
    dictionary = dictionary or default_dictionary()
    rng = np.random.default_rng([seed, 1])
    world = synthesize_world_poses(rng, cfg.corpus_size + cfg.heldout)
    subjects = pose_bank_from_world(world, source=f"synthetic seed {seed}")
    train_bank = PoseBank(subjects.world[: cfg.corpus_size], subjects.canonical[: cfg.corpus_size], subjects.source)
    test_bank = PoseBank(subjects.world[cfg.corpus_size :], subjects.canonical[cfg.corpus_size :], subjects.source)
    synth = SynthConfig(resolution=cfg.resolution, bounds=toy_bounds(cfg, camera))
    puppet = PuppetConfig(sampling="bilinear")
    train = generate_corpus(rng, cfg.corpus_size, train_bank, dictionary, synth, puppet)
    heldout = generate_corpus(rng, cfg.heldout, test_bank, dictionary, synth, puppet)
    return train, heldout


def run(cfg: SelfSupConfig | None = None, *, seed: int = 0, ablate: str | None = None, corpora=None,
        bank: PoseBank | None = None, log_fn=None) -> RunResult:
    """Generate (or reuse) corpora, evaluate the untrained encoder, train, evaluate again."""
    cfg = cfg or SelfSupConfig()
    train, heldout = corpora if corpora is not None else make_corpora(cfg, seed)
    trainer = Trainer(train, cfg, seed=seed, ablate=ablate, bank=bank)
    baseline = evaluate(trainer, heldout)
    t0 = time.perf_counter()
    logs = []
    for _ in range(cfg.steps):
        log = trainer.train_step()
        logs.append(log)
        if log_fn is not None and (log.iteration % cfg.log_every == 0 or log.iteration == cfg.steps):
            log_fn(log)
    wall = time.perf_counter() - t0
    return RunResult(trainer, logs, evaluate(trainer, heldout), baseline, wall)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(trainer: Trainer, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (float32 little-endian parameters) and ``<path>.json``.

    The JSON lists every tensor's name, shape and offset together with the
    configuration, seed, iteration and ablation needed to rebuild it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for prefix, net in (("encoder", trainer.encoder), ("decoder", trainer.decoder)):
        for name, t in net.state_dict().items():
            flat = t.detach().float().reshape(-1).numpy().astype("<f4")
            entries.append({"name": f"{prefix}.{name}", "shape": list(t.shape), "offset": offset})
            chunks.append(flat)
            offset += flat.size
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    np.concatenate(chunks).tofile(bin_path)
    meta = {"tensors": entries, "count": offset, "iteration": trainer.state.iteration, "seed": trainer.state.seed,
            "ablate": trainer.ablate, "config": vars(trainer.cfg)}
    json_path.write_text(json.dumps(meta, indent=1, default=list))
    return bin_path, json_path


def load_checkpoint(trainer: Trainer, path) -> dict:
    """Load parameters written by :func:`save_checkpoint` into ``trainer``; returns the metadata."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    if data.size != meta["count"]:
        raise InvalidInputError(f"checkpoint holds {data.size} values, metadata says {meta['count']}")
    states = {"encoder": {}, "decoder": {}}
    for e in meta["tensors"]:
        prefix, name = e["name"].split(".", 1)
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        states[prefix][name] = torch.from_numpy(data[e["offset"] : e["offset"] + n].copy()).reshape(e["shape"])
    trainer.encoder.load_state_dict(states["encoder"])
    trainer.decoder.load_state_dict(states["decoder"])
    trainer.state.iteration = meta["iteration"]
    return meta
