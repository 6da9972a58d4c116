"""End-to-end pre-training: extract 2D features, adapt, fuse with the point
backbone, decode per-point Gaussians, splat, and optimize against pixels.

Gradient flow is stitched from two engines. The network side runs on the
tape; the renderer side is a hand-derived backward. A training step:

  tape forward -> raw (N, 23) Var -> decode_gaussians -> render each target
  view -> pixel loss -> render_backward per view (summed) -> decode_backward
  -> seed raw.grad -> tape.backward() -> adam_step.

At initialization the head's final layer is zero, so every point decodes to
the fixed point: mean at the point, gray color, opacity 0.5, isotropic scale
s_unit. Training starts from a well-defined, renderable state.

The transfer probe evaluates the 3D trunk alone (encoder + decoder weights,
no 2D input); widths are fusion-independent by construction, so the same
trunk weights run with or without fusion attached. A linear classifier is
trained on frozen per-point features to predict which generator primitive
each point came from, with an identical protocol for the pre-trained and a
randomly initialized trunk.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (ParameterStore, Tape, Var, add_linear_params, adam_step,
                       apply_linear, gather_rows, leaf, load_checkpoint, relu,
                       save_checkpoint, softmax_cross_entropy, step_lr)
from .backbone import BackboneConfig, PointBackbone
from .camera import backproject_depth
from .config import RunConfig, from_dict, to_dict
from .data import SceneSample, ViewSplit, select_views
from .errors import ConfigError, InputError, NumericError
from .fusion import (correspondence_row_indices, gather_multi_view,
                     feature_fusion_params, object_feature_fusion, scene_point_fusion)
from .gaussians import RAW_WIDTH, GaussianGrads, GaussianSet, decode_backward, decode_gaussians
from .image_branch import AdaptationBlock, FrozenExtractor, FrozenExtractorConfig, feature_row_index
from .losses import compute_fg_mask, mse_loss, psnr, weighted_object_loss
from .renderer import render, render_backward

HEAD_HIDDEN = 64


class PretrainModel:
    """Parameter registration and the forward pass up to raw Gaussian rows."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(cfg.seed)

        ex = cfg.extractor
        self.extractor = FrozenExtractor(FrozenExtractorConfig(
            kind=ex.kind, channels=ex.channels, seed=ex.seed))
        self.adapt = AdaptationBlock(self.store, "adapt", self.extractor.channels,
                                     cfg.fusion.c_adapt, rng)

        bb = BackboneConfig(encoder_widths=tuple(cfg.backbone.encoder_widths),
                            decoder_widths=tuple(cfg.backbone.decoder_widths),
                            placement=cfg.fusion.placement)
        merged_width = bb.encoder_widths[0] if cfg.fusion.placement == "encoder_first" else None
        self.backbone = PointBackbone(self.store, bb, rng, merged_width=merged_width)

        if cfg.fusion.strategy == "feature":
            for j in bb.fused_decoder_layers():
                feature_fusion_params(self.store, f"fuse{j}", bb.decoder_widths[j],
                                      cfg.fusion.c_adapt, bb.decoder_widths[j], rng)
        if cfg.fusion.strategy == "point":
            # pseudo-point features must match the post-stage-1 width
            add_linear_params(self.store, "lift2d", cfg.fusion.c_adapt,
                              bb.encoder_widths[0], rng)

        add_linear_params(self.store, "head.fc1", bb.c_3d, HEAD_HIDDEN, rng)
        add_linear_params(self.store, "head.fc2", HEAD_HIDDEN, RAW_WIDTH, rng,
                          zero_init=True)

    def forward(self, tape: Tape | None, sample: SceneSample,
                reference: np.ndarray) -> tuple[Var, np.ndarray]:
        """Returns (raw rows (N_base, 23), base positions (N_base, 3))."""
        cfg = self.cfg
        store = self.store
        strategy = cfg.fusion.strategy
        positions = sample.cloud.positions
        ref = np.asarray(reference, dtype=np.int64)
        ref_cams = [sample.cameras[int(i)] for i in ref]
        h_img, w_img = sample.images.shape[2], sample.images.shape[3]

        rows: Var | None = None
        if strategy != "none":
            feats = self.extractor.extract(sample.images[ref])
            rows = self.adapt.adapt_images(tape, store, feats)

        if strategy == "feature":
            view_idx = correspondence_row_indices(positions, ref_cams, h_img, w_img)
            f2d = gather_multi_view(tape, rows, view_idx)
            latent, base, _ = self.backbone.encode(tape, store, positions)
            feats3 = self.backbone.decode(
                tape, store, latent,
                fuser=lambda j, x: object_feature_fusion(tape, store, f"fuse{j}", x, f2d))
        elif strategy == "point":
            if sample.depths is None:
                raise InputError("point fusion needs depth maps; sample has none")
            p2d_pos, p2d_idx = [], []
            for pos_in_ref, cam in enumerate(ref_cams):
                pc, pix = backproject_depth(sample.depths[int(ref[pos_in_ref])], cam)
                if len(pc) == 0:
                    continue
                p2d_pos.append(pc.positions)
                p2d_idx.append(feature_row_index(
                    np.full(len(pc), pos_in_ref), pix[:, 1], pix[:, 0], h_img, w_img))
            if not p2d_pos:
                raise InputError("no valid depth pixels in any reference view")
            p2d_positions = np.concatenate(p2d_pos)
            idx_all = np.concatenate(p2d_idx)
            p2d_feats = apply_linear(tape, store, "lift2d",
                                     gather_rows(tape, rows, idx_all))

            def injector(stage1: Var):
                merged = scene_point_fusion(tape, p2d_positions, p2d_feats,
                                            positions, stage1, cfg.fusion.voxel_size)
                return merged.positions, merged.features

            latent, base, _ = self.backbone.encode(tape, store, positions, injector)
            feats3 = self.backbone.decode(tape, store, latent)
        else:
            latent, base, _ = self.backbone.encode(tape, store, positions)
            feats3 = self.backbone.decode(tape, store, latent)

        h = relu(tape, apply_linear(tape, store, "head.fc1", feats3))
        raw = apply_linear(tape, store, "head.fc2", h)
        return raw, base

    def predict_gaussians(self, sample: SceneSample, reference: np.ndarray) -> GaussianSet:
        raw, base = self.forward(None, sample, reference)
        return decode_gaussians(raw.data, base)


def save_model(stem: str | Path, model: PretrainModel, extra: dict | None = None) -> None:
    payload = {"config": to_dict(model.cfg)}
    if extra:
        payload.update(extra)
    save_checkpoint(stem, model.store, extra=payload)


def load_model(stem: str | Path) -> tuple[PretrainModel, dict]:
    """Rebuild the model from a checkpoint's embedded config, then load weights."""
    _, extra = load_checkpoint(stem)
    if "config" not in extra:
        raise InputError(f"checkpoint {stem} has no embedded config")
    model = PretrainModel(from_dict(extra["config"]))
    load_checkpoint(stem, model.store)
    return model, extra


# ---------------------------------------------------------------------------
# training


@dataclass
class StepStats:
    loss: float
    psnr_db: float
    n_gaussians: int


def training_step(model: PretrainModel, sample: SceneSample, split: ViewSplit,
                  loss_scale: float = 1.0) -> StepStats:
    """One sample's forward/backward; gradients accumulate into model.store."""
    cfg = model.cfg
    bg = tuple(cfg.loss.background)
    tape = Tape()
    raw, base = model.forward(tape, sample, split.reference)
    g = decode_gaussians(raw.data, base)

    rend_cams = [sample.cameras[int(i)] for i in split.render]
    rendered = np.stack([render(g, cam, bg).image for cam in rend_cams])
    gt = sample.images[split.render]

    if cfg.mode == "object":
        masks = np.stack([compute_fg_mask(sample.cloud, cam).mask for cam in rend_cams])
        loss, grad_img = weighted_object_loss(rendered, gt, masks,
                                              w_fg=cfg.loss.w_fg, w_bg=cfg.loss.w_bg)
    else:
        loss, grad_img = mse_loss(rendered, gt)
    grad_img = grad_img * loss_scale

    grads = GaussianGrads.zeros(len(g))
    for v, cam in enumerate(rend_cams):
        grads.add_(render_backward(g, cam, bg, grad_img[v]))
    raw.grad += decode_backward(raw.data, base, grads)
    tape.backward()
    return StepStats(loss=loss, psnr_db=psnr(rendered, gt), n_gaussians=len(g))


def train(cfg: RunConfig, samples: list[SceneSample], out_dir: str | Path,
          max_steps: int | None = None, quiet: bool = False) -> dict:
    """Full loop: epochs over shuffled samples, batched gradient accumulation,
    stepped learning rate, JSON-lines metrics, periodic checkpoints.

    Returns {"steps", "final_loss", "first_loss", "checkpoint", "metrics_path"}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = PretrainModel(cfg)
    opt = cfg.optimizer
    master = np.random.default_rng(cfg.seed + 101)

    metrics_path = out / "metrics.jsonl"
    step = 0
    first_loss = final_loss = float("nan")
    t0 = time.time()
    with metrics_path.open("w") as log:
        for epoch in range(opt.epochs):
            lr = step_lr(epoch, opt.lr, opt.lr_decay, opt.lr_step_epochs)
            order = master.permutation(len(samples))
            for start in range(0, len(order), opt.batch_size):
                batch = order[start:start + opt.batch_size]
                model.store.zero_grads()
                losses, psnrs, n_g = [], [], 0
                batch_seeds = []
                for si in batch:
                    view_seed = int(master.integers(2 ** 31))
                    batch_seeds.append((int(samples[si].seed), view_seed))
                    split = select_views(samples[si], cfg.mode, view_seed,
                                         v_ref=cfg.views.v_ref, v_rend=cfg.views.v_rend,
                                         bins=cfg.views.bins, interval=cfg.views.interval,
                                         restriction=cfg.views.restriction)
                    stats = training_step(model, samples[si], split,
                                          loss_scale=1.0 / len(batch))
                    losses.append(stats.loss)
                    psnrs.append(stats.psnr_db)
                    n_g = stats.n_gaussians
                loss = float(np.mean(losses))
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at step {step}; batch (sample seed, view seed) "
                        f"pairs: {batch_seeds}")
                adam_step(model.store, lr, weight_decay=opt.weight_decay, mode=opt.kind)
                if step == 0:
                    first_loss = loss
                final_loss = loss
                log.write(json.dumps({"step": step, "epoch": epoch, "loss": loss,
                                      "psnr": float(np.mean(psnrs)), "lr": lr,
                                      "n_gaussians": n_g}) + "\n")
                step += 1
                if step % cfg.checkpoint_every == 0:
                    save_model(out / f"ckpt_{step:06d}", model,
                               {"step": step, "epoch": epoch})
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
            if not quiet and (epoch % 10 == 0 or epoch == opt.epochs - 1):
                print(f"epoch {epoch:4d} step {step:6d} loss {final_loss:.6f} lr {lr:.2e}")

    save_model(out / "ckpt_final", model, {"step": step, "epoch": -1})
    return {"steps": step, "first_loss": first_loss, "final_loss": final_loss,
            "checkpoint": str(out / "ckpt_final"), "metrics_path": str(metrics_path),
            "seconds": time.time() - t0}


# ---------------------------------------------------------------------------
# evaluation


def eval_model(model: PretrainModel, samples: list[SceneSample], seed: int = 0) -> dict:
    """Held-out render quality: per-sample mean PSNR over a fresh view split,
    plus a sanity row comparing ground truth against itself (the PSNR cap)."""
    cfg = model.cfg
    rows = []
    rng = np.random.default_rng(seed)
    for sample in samples:
        split = select_views(sample, cfg.mode, int(rng.integers(2 ** 31)),
                             v_ref=cfg.views.v_ref, v_rend=cfg.views.v_rend,
                             bins=cfg.views.bins, interval=cfg.views.interval,
                             restriction=cfg.views.restriction)
        g = model.predict_gaussians(sample, split.reference)
        per_view = []
        for i in split.render:
            img = render(g, sample.cameras[int(i)], tuple(cfg.loss.background)).image
            per_view.append(psnr(img, sample.images[int(i)]))
        rows.append({"sample_seed": sample.seed, "views": [int(i) for i in split.render],
                     "psnr_per_view": per_view, "psnr": float(np.mean(per_view))})
    gt0 = samples[0].images[0]
    return {"per_sample": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
            "sanity_identical_db": psnr(gt0, gt0)}


# ---------------------------------------------------------------------------
# transfer probe


def _trunk_features(store: ParameterStore, cfg: RunConfig, sample: SceneSample) -> np.ndarray:
    """Per-point decoder features from the 3D trunk alone (no 2D input)."""
    bb = BackboneConfig(encoder_widths=tuple(cfg.backbone.encoder_widths),
                        decoder_widths=tuple(cfg.backbone.decoder_widths),
                        placement="none")
    probe_store = ParameterStore()
    trunk = PointBackbone(probe_store, bb, np.random.default_rng(0))
    for name in probe_store.names():
        if name in store:
            probe_store.get(name).data[...] = store.get(name).data
    latent, _, _ = trunk.encode(None, probe_store, sample.cloud.positions)
    return trunk.decode(None, probe_store, latent).data


def _fit_linear_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int,
                      seed: int, train_frac: float = 0.7, iters: int = 200,
                      lr: float = 0.05) -> float:
    """Multinomial logistic regression on frozen features; returns test accuracy."""
    n = feats.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = int(round(train_frac * n))
    tr, te = order[:cut], order[cut:]
    if len(tr) == 0 or len(te) == 0:
        raise InputError(f"probe split degenerate: {len(tr)} train / {len(te)} test points")

    mu = feats[tr].mean(axis=0)
    sd = feats[tr].std(axis=0) + 1e-8
    z = (feats - mu) / sd

    store = ParameterStore()
    add_linear_params(store, "probe", feats.shape[1], n_classes, rng)
    x_tr = leaf(z[tr])
    for _ in range(iters):
        store.zero_grads()
        tape = Tape()
        out = softmax_cross_entropy(
            tape, apply_linear(tape, store, "probe", x_tr), labels[tr])
        out.grad += 1.0
        tape.backward()
        adam_step(store, lr)
    logits = apply_linear(None, store, "probe", leaf(z[te])).data
    return float((logits.argmax(axis=1) == labels[te]).mean())


def probe(model: PretrainModel, samples: list[SceneSample], seed: int = 0) -> dict:
    """Paired per-point primitive classification: pre-trained trunk features
    vs. a randomly initialized trunk under the identical probe protocol."""
    cfg = model.cfg
    random_model = PretrainModel(
        from_dict({**to_dict(cfg), "seed": cfg.seed + 7919}))
    per_sample = []
    floors = []
    for k, sample in enumerate(samples):
        if sample.cloud.labels is None:
            raise InputError(f"sample seed {sample.seed} has no per-point labels")
        labels = sample.cloud.labels
        n_classes = int(labels.max()) + 1
        floors.append(1.0 / n_classes)
        acc_pre = _fit_linear_probe(_trunk_features(model.store, cfg, sample),
                                    labels, n_classes, seed + k)
        acc_rnd = _fit_linear_probe(_trunk_features(random_model.store, cfg, sample),
                                    labels, n_classes, seed + k)
        per_sample.append({"sample_seed": sample.seed, "n_classes": n_classes,
                           "pretrained_acc": acc_pre, "random_acc": acc_rnd})
    pre = float(np.mean([r["pretrained_acc"] for r in per_sample]))
    rnd = float(np.mean([r["random_acc"] for r in per_sample]))
    return {"per_sample": per_sample, "pretrained_acc": pre, "random_acc": rnd,
            "delta": pre - rnd, "chance_floor": float(np.mean(floors))}
