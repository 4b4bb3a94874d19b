"""Training loop: grounded organ/abnormality alignment or a vanilla CLIP baseline."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .abnodict import DEFAULT_MAX_NEGATIVES, AbnormalityDictionary, assemble_text_batch
from .encoders import EncoderConfig, GroundedModel, TextEncoder, build_model, organ_pool
from .losses import (
    LossBreakdown,
    LossConfig,
    TrainingDivergence,
    abnormality_text_loss,
    clip_batch_loss,
    organ_text_loss,
    segmentation_loss,
    weighted_total,
)
from .reportproc import OrganLexicon, ParsedReport, organ_template, parse_report
from .synthdata import Manifest, mix_seed

log = logging.getLogger(__name__)

MAGIC = b"CTGLIP01"
FORMAT_VERSION = 1
EMPTY_REPORT_TEXT = "no evident abnormality"


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    weight_decay: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    enable_ot: bool = True
    enable_at: bool = True
    enable_dict: bool = True
    enable_segm: bool = True
    vanilla_clip: bool = False
    T: int = 4
    max_negatives: int = DEFAULT_MAX_NEGATIVES
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if not 0 <= self.lr_final <= self.lr_init:
            raise TrainConfigError("learning rates must satisfy 0 <= lr_final <= lr_init")
        if self.T < 0 or self.max_negatives < 0:
            raise TrainConfigError("T and max_negatives must be non-negative")
        if not self.vanilla_clip and not (self.enable_ot or self.enable_at or self.enable_segm):
            raise TrainConfigError("grounded mode needs at least one of enable_ot, enable_at, enable_segm")

    @property
    def mode(self) -> str:
        return "vanilla" if self.vanilla_clip else "grounded"

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["betas"] = list(self.betas)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def cosine_lr(step: int, total_steps: int, lr_init: float = 1e-3, lr_final: float = 1e-6) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_init
    if step == total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * step / total_steps))


def schedule_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate of optimisation step ``step`` (0-based) out of ``total_steps``.

    The first step runs at ``lr_init`` and the last at ``lr_final``.
    """
    return cosine_lr(step, max(total_steps - 1, 1), cfg.lr_init, cfg.lr_final)


# -- data --------------------------------------------------------------------

@dataclass
class TrainingData:
    subject_ids: list[str]
    volumes: torch.Tensor  # (n, 1, D, H, W)
    labels: torch.Tensor  # (n, D, H, W), organ ids
    reports: list[str]
    parsed: list[ParsedReport]
    organs: list[list[int]]

    def __len__(self):
        return len(self.subject_ids)

    @classmethod
    def from_manifest(cls, manifest: Manifest, lexicon: OrganLexicon) -> "TrainingData":
        vols, labs, reports, parsed, organs, ids = [], [], [], [], [], []
        for i, rec in enumerate(manifest.records):
            subject = manifest.load_subject(i)
            present = subject.mask.organ_ids()
            unknown = [o for o in present if o not in lexicon]
            if unknown:
                raise ValueError(f"{rec.subject_id}: mask labels {unknown} are not in the lexicon")
            report = subject.report.strip()
            vols.append(subject.volume.voxels)
            labs.append(subject.mask.labels)
            reports.append(report)
            p = parse_report(report, lexicon)
            p.descriptions = [d for d in p.descriptions if d.organ_id in set(present)]
            parsed.append(p)
            organs.append(present)
            ids.append(rec.subject_id)
        if not ids:
            return cls([], torch.zeros(0, 1, 1, 1, 1), torch.zeros(0, 1, 1, 1, dtype=torch.long), [], [], [])
        return cls(
            subject_ids=ids,
            volumes=torch.as_tensor(np.stack(vols))[:, None].float(),
            labels=torch.as_tensor(np.stack(labs).astype(np.int64)),
            reports=reports,
            parsed=parsed,
            organs=organs,
        )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(mix_seed(seed, 0xE90C, epoch)).permutation(n)


def batches_for_epoch(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = epoch_order(n, seed, epoch)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# -- training step -------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    lr: float
    losses: dict
    negatives: int = 0

    def to_json(self) -> dict:
        doc = {"step": self.step, "lr": self.lr}
        doc.update(self.losses)
        if "l_clip" not in self.losses:
            doc["B"] = self.negatives
        return doc

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            self.losses.get("l_ot", 0.0),
            self.losses.get("l_at", 0.0),
            self.losses.get("l_segm", 0.0),
            self.losses["total"],
        )


class Trainer:
    """Owns the model parameters and optimizer; the single writer during training."""

    def __init__(
        self,
        model: GroundedModel,
        text_encoder: TextEncoder,
        lexicon: OrganLexicon,
        cfg: TrainConfig,
        loss_cfg: LossConfig = LossConfig(),
        dictionary: AbnormalityDictionary | None = None,
        total_steps: int = 1,
    ):
        if text_encoder.dim != model.cfg.d:
            raise ValueError(f"text dimension {text_encoder.dim} != joint dimension {model.cfg.d}")
        self.model = model
        self.text_encoder = text_encoder
        self.lexicon = lexicon
        self.cfg = cfg
        self.loss_cfg = loss_cfg
        self.dictionary = dictionary
        self.total_steps = total_steps
        self.step = 0
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=cfg.lr_init, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
        )
        self._text_cache: dict[str, torch.Tensor] = {}

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        missing = [t for t in dict.fromkeys(texts) if t not in self._text_cache]
        if missing:
            vecs = self.text_encoder.encode(missing)
            dtype = next(self.model.parameters()).dtype
            for t, v in zip(missing, vecs):
                self._text_cache[t] = torch.as_tensor(np.array(v), dtype=dtype)
        if not texts:
            return torch.zeros(0, self.model.cfg.d)
        return torch.stack([self._text_cache[t] for t in texts])

    def _grounded_losses(self, data: TrainingData, idx: np.ndarray, fm: torch.Tensor):
        tau = self.loss_cfg.tau
        cfg = self.cfg
        zero = fm.new_zeros(())
        ot_terms, at_terms = [], []
        negatives = 0
        for row, i in enumerate(idx):
            if not (cfg.enable_ot or cfg.enable_at):
                break
            ids, Z = organ_pool(fm[row], data.labels[i], self.model.head)
            if not ids:
                continue
            if cfg.enable_ot:
                T_ot = self.embed_texts([organ_template(self.lexicon.name(o)) for o in ids])
                ot_terms.append(organ_text_loss(Z, T_ot, tau))
            if cfg.enable_at:
                batch = assemble_text_batch(
                    data.parsed[i],
                    ids,
                    self.dictionary if cfg.enable_dict else None,
                    cfg.T if cfg.enable_dict else 0,
                    mix_seed(cfg.seed, 0xD1C7, self.step, int(i)),
                    self.lexicon,
                    cfg.max_negatives,
                )
                negatives += batch.B
                at_terms.append(abnormality_text_loss(Z, self.embed_texts(batch.texts), tau))
        l_ot = torch.stack(ot_terms).mean() if ot_terms else zero
        l_at = torch.stack(at_terms).mean() if at_terms else zero
        if cfg.enable_segm:
            logits = self.model.seg_head(fm)
            l_segm = segmentation_loss(
                logits,
                data.labels[idx],
                self.loss_cfg.dice_epsilon,
                self.loss_cfg.ce_weight,
                self.loss_cfg.dice_weight,
            )
        else:
            l_segm = zero
        return l_ot, l_at, l_segm, negatives

    def train_step(self, data: TrainingData, idx: Sequence[int]) -> StepRecord:
        """One optimizer update on the subjects ``idx`` of ``data``."""
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty batch")
        lr = schedule_lr(self.step, self.total_steps, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        vols = data.volumes[torch.as_tensor(idx)].to(next(self.model.parameters()).dtype)
        fm = self.model(vols)
        subjects = [data.subject_ids[i] for i in idx]
        try:
            if self.cfg.vanilla_clip:
                V = F.normalize(self.model.head(fm.mean(dim=(2, 3, 4))), dim=-1)
                T = self.embed_texts([data.reports[i] or EMPTY_REPORT_TEXT for i in idx])
                l_clip = clip_batch_loss(V, T, self.loss_cfg.tau)
                value = float(l_clip.detach())
                if not math.isfinite(value):
                    raise TrainingDivergence(f"l_clip is {value}")
                loss = l_clip
                losses = {"l_clip": value, "total": value}
                negatives = 0
            else:
                l_ot, l_at, l_segm, negatives = self._grounded_losses(data, idx, fm)
                loss = weighted_total(l_ot, l_at, l_segm, self.loss_cfg)
                losses = {
                    "l_ot": float(l_ot.detach()),
                    "l_at": float(l_at.detach()),
                    "l_segm": float(l_segm.detach()),
                    "total": float(loss.detach()),
                }
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"step {self.step}, subjects {subjects}: {exc}") from exc
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        record = StepRecord(self.step, lr, losses, negatives)
        self.step += 1
        return record


def train_step(trainer: Trainer, data: TrainingData, idx: Sequence[int]) -> LossBreakdown:
    return trainer.train_step(data, idx).breakdown()


# -- checkpoints ---------------------------------------------------------------

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    step: int
    train_config: TrainConfig
    encoder_config: EncoderConfig
    loss_config: LossConfig
    lexicon: OrganLexicon
    text_encoder: dict
    num_classes: int
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    total_steps: int = 0
    rng: dict = field(default_factory=dict)

    def build_model(self) -> GroundedModel:
        model = GroundedModel(self.encoder_config, self.num_classes)
        model = model.to(next(iter(self.model_state.values())).dtype)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    # serialization: magic, u32 version, u64 header length, JSON header, raw tensors
    def to_bytes(self) -> bytes:
        tensors: list[tuple[str, torch.Tensor]] = [(f"model.{k}", v) for k, v in self.model_state.items()]
        opt_header = None
        if self.optimizer_state is not None:
            opt_header = {"param_groups": _jsonable(self.optimizer_state["param_groups"]), "state": {}}
            for pid, st in sorted(self.optimizer_state["state"].items()):
                keys = []
                for key, val in sorted(st.items()):
                    tensors.append((f"optim.{pid}.{key}", torch.as_tensor(val)))
                    keys.append(key)
                opt_header["state"][str(pid)] = keys
        if "torch" in self.rng:
            tensors.append(("rng.torch", self.rng["torch"]))
        index, blobs, offset = [], [], 0
        for name, t in tensors:
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise TypeError(f"cannot serialise {name} of dtype {t.dtype}")
            raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "step": self.step,
            "total_steps": self.total_steps,
            "train_config": self.train_config.to_json(),
            "encoder_config": self.encoder_config.to_json(),
            "loss_config": self.loss_config.to_json(),
            "lexicon": self.lexicon.to_json(),
            "text_encoder": self.text_encoder,
            "num_classes": self.num_classes,
            "optimizer": opt_header,
            "rng": {k: v for k, v in self.rng.items() if k != "torch"},
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", data, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = 8 + struct.calcsize("<IQ")
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        body = memoryview(data)[start + hlen :]
        tensors = {}
        for entry in header["tensors"]:
            arr = np.frombuffer(body[entry["offset"] : entry["offset"] + entry["nbytes"]], dtype=entry["dtype"])
            tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        optimizer_state = None
        if header["optimizer"] is not None:
            groups = header["optimizer"]["param_groups"]
            for g in groups:
                if "betas" in g:
                    g["betas"] = tuple(g["betas"])
            state = {
                int(pid): {key: tensors[f"optim.{pid}.{key}"] for key in keys}
                for pid, keys in header["optimizer"]["state"].items()
            }
            optimizer_state = {"state": state, "param_groups": groups}
        rng = dict(header.get("rng", {}))
        if "rng.torch" in tensors:
            rng["torch"] = tensors["rng.torch"]
        return cls(
            step=header["step"],
            total_steps=header["total_steps"],
            train_config=TrainConfig.from_json(header["train_config"]),
            encoder_config=EncoderConfig(**header["encoder_config"]),
            loss_config=LossConfig(**header["loss_config"]),
            lexicon=OrganLexicon.from_json(header["lexicon"]),
            text_encoder=header["text_encoder"],
            num_classes=header["num_classes"],
            model_state=model_state,
            optimizer_state=optimizer_state,
            rng=rng,
        )

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if torch.is_tensor(obj):
        return obj.item()
    return obj


def snapshot(trainer: Trainer) -> Checkpoint:
    return Checkpoint(
        step=trainer.step,
        total_steps=trainer.total_steps,
        train_config=trainer.cfg,
        encoder_config=trainer.model.cfg,
        loss_config=trainer.loss_cfg,
        lexicon=trainer.lexicon,
        text_encoder=trainer.text_encoder.to_json(),
        num_classes=trainer.model.num_classes,
        model_state={k: v.detach().clone() for k, v in trainer.model.state_dict().items()},
        optimizer_state=trainer.optimizer.state_dict(),
        rng={"seed": trainer.cfg.seed, "torch": torch.random.get_rng_state()},
    )


def restore(trainer: Trainer, ckpt: Checkpoint) -> None:
    trainer.model.load_state_dict(ckpt.model_state)
    if ckpt.optimizer_state is not None:
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
    trainer.step = ckpt.step
    if "torch" in ckpt.rng:
        torch.random.set_rng_state(ckpt.rng["torch"])


# -- fit -----------------------------------------------------------------------

def num_classes_for(lexicon: OrganLexicon) -> int:
    return (max(lexicon.ids()) if len(lexicon) else 0) + 1


def _truncate_log(path: Path, keep_before: int) -> None:
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["step"] < keep_before]
    path.write_text("".join(ln + "\n" for ln in kept))


def fit(
    cfg: TrainConfig,
    manifest: Manifest | TrainingData,
    out_dir,
    *,
    lexicon: OrganLexicon,
    text_encoder: TextEncoder,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    loss_cfg: LossConfig = LossConfig(),
    dictionary: AbnormalityDictionary | None = None,
    resume: bool = True,
    max_steps: int | None = None,
) -> Checkpoint:
    """Train for ``epochs * ceil(n / batch_size)`` steps, checkpointing into ``out_dir``.

    ``out_dir/last.ckpt`` is refreshed every ``checkpoint_every`` steps
    (default: once per epoch) and is picked up on the next call when
    ``resume`` is set.  ``max_steps`` stops early, as an interruption would.
    The finished run is written to ``out_dir/final.ckpt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = manifest if isinstance(manifest, TrainingData) else TrainingData.from_manifest(manifest, lexicon)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total_steps = cfg.epochs * steps_per_epoch

    model = build_model(encoder_cfg, num_classes_for(lexicon), seed=cfg.seed)
    trainer = Trainer(model, text_encoder, lexicon, cfg, loss_cfg, dictionary, total_steps=total_steps)
    text_state = text_encoder.state_bytes()

    last = out_dir / "last.ckpt"
    metrics = out_dir / "metrics.jsonl"
    if resume and last.exists():
        ckpt = Checkpoint.load(last)
        if ckpt.train_config != cfg or ckpt.total_steps != total_steps:
            raise ValueError(f"{last} was written by a different configuration")
        restore(trainer, ckpt)
        log.info("resuming from %s at step %d", last, trainer.step)
    if trainer.step:
        _truncate_log(metrics, trainer.step)
    else:
        metrics.write_text("")

    every = cfg.checkpoint_every or steps_per_epoch or 1
    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    with metrics.open("a") as log_file:
        while trainer.step < stop:
            epoch, offset = divmod(trainer.step, steps_per_epoch)
            batch = batches_for_epoch(n, cfg.batch_size, cfg.seed, epoch)[offset]
            try:
                record = trainer.train_step(data, batch)
            except TrainingDivergence as exc:
                dump = out_dir / "divergence.json"
                dump.write_text(
                    json.dumps(
                        {"step": trainer.step, "subjects": [data.subject_ids[i] for i in batch], "error": str(exc)},
                        indent=1,
                    )
                )
                exc.dump_path = dump
                raise
            log_file.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            log_file.flush()
            if trainer.step % every == 0 and trainer.step < stop:
                snapshot(trainer).save(last)
    if text_encoder.state_bytes() != text_state:
        raise RuntimeError("text encoder state changed during training")
    ckpt = snapshot(trainer)
    ckpt.save(last)
    if trainer.step == total_steps:
        ckpt.save(out_dir / "final.ckpt")
    return ckpt
