"""Config-driven training with cached stain targets and augmentation.

The loop estimates each training image's stain matrix once up front;
those matrices are both the regression targets of the adversarial
branch and, together with cached concentrations, the cheap source of
stain-perturbed siblings for the attention pass (re-rendering through a
perturbed matrix instead of re-running estimation every step).
"""

import json
import os
import time

import numpy as np

from . import stains
from .config import experiment_hash, to_raw
from .engine.checkpoint import save_checkpoint
from .engine.optim import AdamW
from .engine.tensor import Tape
from .errors import NonFiniteLoss, StainlabError
from .metrics import evaluate_masks
from .model import build_model, forward_train
from .branch import effective_strength


def prepare_stain_cache(samples, log=None):
    """Attach estimated stain matrix and concentrations to each sample.

    Falls back to the generator's true matrix if estimation fails on a
    particular image (degenerate crops); the fallback count is
    reported so silent failures cannot hide.
    """
    fallbacks = 0
    for sample in samples:
        if "est_s" in sample:
            continue
        try:
            est = stains.estimate_stain_matrix(sample["image"])
        except StainlabError:
            est = np.asarray(sample["true_s"], dtype=np.float64)
            fallbacks += 1
        sample["est_s"] = est
        sample["conc"] = stains.deconvolve(sample["image"], est)
    if fallbacks and log:
        log(f"stain estimation fell back to ground truth on {fallbacks}/{len(samples)} images")
    return samples


def _augment_batch(chunk, mode, train_cfg, rng):
    """Stain-perturbed copies rendered from cached concentrations."""
    out = []
    for sample in chunk:
        h, w = sample["image"].shape[:2]
        if mode == "light":
            perturbed = stains.perturb_stain_light(
                sample["est_s"], rng, train_cfg.aug_scale_range, train_cfg.aug_shift_range
            )
        else:
            perturbed = stains.perturb_stain_strong(sample["est_s"], rng, train_cfg.aug_elem_range)
        out.append(stains.render(perturbed, sample["conc"], h, w))
    return np.stack(out)


def train_model(exp_cfg, splits, out_dir=None, resume_from=None, log=None):
    """Train one model per the experiment config; returns a result dict.

    ``splits`` maps split names to sample lists ({"image", "mask",
    "true_s"} dicts); "train" and "val" are required.  When ``out_dir``
    is given, best/last checkpoints and a report.json are written.
    """
    exp_cfg.validate()
    say = log or (lambda msg: None)
    train_cfg = exp_cfg.train
    model_cfg = exp_cfg.model
    variant = model_cfg.variant
    cfg_hash = experiment_hash(exp_cfg)

    rng = np.random.default_rng(train_cfg.seed)
    model = build_model(model_cfg, rng)
    params = model.parameters()
    no_decay = tuple(n for n in params if n.endswith((".bias", ".gamma", ".beta")))
    optimizer = AdamW(
        params,
        lr=train_cfg.lr,
        weight_decay=train_cfg.weight_decay,
        no_decay=no_decay,
    )

    start_epoch = 0
    if resume_from is not None:
        from .engine.checkpoint import load_checkpoint

        ck_params, ck_buffers, ck_opt, ck_meta = load_checkpoint(resume_from)
        model.load_parameters(ck_params)
        model.load_buffers(ck_buffers)
        if ck_opt is not None:
            optimizer.load_state_dict(ck_opt)
        start_epoch = int(ck_meta.get("epoch", 0))
        say(f"resumed from {resume_from} at epoch {start_epoch}")

    train_set = list(splits["train"])
    val_set = list(splits["val"])
    if variant != "BASELINE":
        prepare_stain_cache(train_set, log=say)

    needs_aug = variant == "STINV_CA"
    history = []
    best = {"val_dice": -1.0, "epoch": -1}
    step = optimizer.step_count

    for epoch in range(start_epoch, train_cfg.epochs):
        started = time.time()
        order = rng.permutation(len(train_set))
        epoch_losses = {"task": [], "stain": []}
        model.set_training(True)

        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            chunk = [train_set[i] for i in idx]
            images = np.stack([s["image"] for s in chunk])
            masks = np.stack([s["mask"] for s in chunk])
            stain_targets = None
            aug_images = None
            if variant != "BASELINE":
                stain_targets = np.stack([s["est_s"] for s in chunk])
            if needs_aug:
                aug_images = _augment_batch(chunk, train_cfg.aug_mode, train_cfg, rng)

            tape = Tape()
            with tape:
                _, losses = forward_train(
                    model,
                    images,
                    masks,
                    aug_images=aug_images,
                    stain_targets=stain_targets,
                    alpha=train_cfg.alpha,
                    grl_strength=effective_strength(model_cfg.grl, step),
                    task_loss=train_cfg.task_loss,
                )
            total = losses["total"]
            if not np.isfinite(total.data):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} step {step} (task="
                    f"{float(losses['task'].data)!r})"
                )
            tape.backward(total)
            tape.clear()
            optimizer.step()
            optimizer.zero_grad()
            step += 1

            epoch_losses["task"].append(float(losses["task"].data))
            if losses["stain"] is not None:
                epoch_losses["stain"].append(float(losses["stain"].data))

        val_scores = evaluate_masks(model, val_set)
        record = {
            "epoch": epoch + 1,
            "task_loss": float(np.mean(epoch_losses["task"])),
            "stain_loss": float(np.mean(epoch_losses["stain"])) if epoch_losses["stain"] else None,
            "dice": val_scores["dice"],
            "precision": val_scores["precision"],
            "recall": val_scores["recall"],
            "seconds": round(time.time() - started, 2),
        }
        history.append(record)
        stain_msg = f" stain={record['stain_loss']:.4f}" if record["stain_loss"] is not None else ""
        say(
            f"epoch {record['epoch']:3d} task={record['task_loss']:.4f}{stain_msg} "
            f"val_dice={record['dice']:.4f} ({record['seconds']}s)"
        )

        if out_dir is not None:
            meta = {
                "config_hash": cfg_hash,
                "config": to_raw(exp_cfg),
                "seed": train_cfg.seed,
                "epoch": epoch + 1,
                "val_dice": val_scores["dice"],
            }
            save_checkpoint(os.path.join(out_dir, "last"), model.parameters(), model.buffers(), optimizer.state_dict(), meta)
            if val_scores["dice"] > best["val_dice"]:
                save_checkpoint(os.path.join(out_dir, "best"), model.parameters(), model.buffers(), optimizer.state_dict(), meta)
        if val_scores["dice"] > best["val_dice"]:
            best = {"val_dice": val_scores["dice"], "epoch": epoch + 1}

    final = {"val": evaluate_masks(model, val_set)}
    for name, sample_list in splits.items():
        if name in ("train", "val") or not sample_list:
            continue
        final[name] = evaluate_masks(model, sample_list)

    report = {
        "config_hash": cfg_hash,
        "seed": train_cfg.seed,
        "variant": variant,
        "epochs": history,
        "best": best,
        "final": final,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)

    return {"model": model, "optimizer": optimizer, "report": report, "history": history}
