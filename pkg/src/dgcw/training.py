"""SGD with momentum and the poly schedule, hard-example mining, and the
training loop over the synthetic dataset."""

from __future__ import annotations

import os

import numpy as np

from .data import Dataset, augment
from .io import save_checkpoint, write_csv
from .metrics import evaluate, miou
from .network import build_network, total_loss
from .tensor import Tensor, dtype_from_name, no_grad, rng_for, softmax


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iter/max_iter)^power; exact at both endpoints."""
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


class Sgd:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    Decay skips normalization scales/shifts."""

    def __init__(self, named_params, momentum=0.9, weight_decay=5e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            leaf = name.rsplit(".", 1)[-1]
            if self.weight_decay and leaf not in ("scale", "shift"):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def ohem_filter(probs: np.ndarray, theta: float, min_kept: int) -> np.ndarray:
    """Keep every pixel whose correct-class probability is below theta; when
    fewer qualify, keep the min(min_kept, total) lowest-probability pixels,
    ties broken toward the lowest flat index."""
    p = np.asarray(probs).reshape(-1)
    mask = p < theta
    need = min(min_kept, p.size)
    if mask.sum() < need:
        order = np.argsort(p, kind="stable")[:need]
        mask = np.zeros(p.size, dtype=bool)
        mask[order] = True
    return mask.reshape(np.asarray(probs).shape)


def correct_class_probs(logits: Tensor, labels: np.ndarray, ignore_index=255) -> np.ndarray:
    """Per-pixel probability of the labelled class (ignored pixels get 1.0
    so the hard-example filter never selects them)."""
    with no_grad():
        probs = softmax(logits.detach(), 1).data
    lab = np.asarray(labels)
    valid = lab != ignore_index
    safe = np.where(valid, lab, 0).astype(np.intp)
    picked = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    return np.where(valid, picked, 1.0)


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite."""


def train(cfg, data_root: str, out_dir: str, log_name: str = "metrics.csv",
          checkpoint_name: str = "best.ckpt", progress=None):
    """Run the full loop: sample batch -> augment -> forward -> loss (with
    optional hard-example mining on the main term) -> backward -> SGD step
    at the poly rate. Logs (iter, lr, loss_main, loss_aux, val_miou) every
    evaluation period and keeps the best-mIoU checkpoint. Deterministic for
    a fixed config."""
    dtype = dtype_from_name(cfg.precision)
    ds = Dataset(data_root)
    net_cfg = cfg.network_config()
    net = build_network(net_cfg, cfg.seed, dtype)
    opt = Sgd(net.named_parameters(), cfg.momentum, cfg.weight_decay)

    eval_every = cfg.eval_every or max(1, ds.count("train") // cfg.batch_size)
    rows = []
    best = (-1.0, None)
    train_imgs = ds.images["train"]
    train_labs = ds.labels["train"]
    n_train = len(train_imgs)

    for it in range(cfg.iterations):
        batch_rng = rng_for(cfg.seed, "batch", it)
        idx = batch_rng.choice(n_train, size=min(cfg.batch_size, n_train), replace=False)
        imgs, labs = [], []
        for slot, i in enumerate(idx):
            aug_rng = rng_for(cfg.seed, "augment", it * cfg.batch_size + slot)
            im, la = augment(train_imgs[i], train_labs[i], cfg.crop,
                             (cfg.scale_min, cfg.scale_max), aug_rng)
            imgs.append(im)
            labs.append(la)
        batch = Tensor(np.stack(imgs).astype(dtype))
        labels = np.stack(labs)

        net.set_training(True)
        out = net(batch)
        keep = None
        if cfg.ohem:
            probs = correct_class_probs(out.main_logits, labels)
            keep = ohem_filter(probs, cfg.ohem_theta, cfg.ohem_min_kept)
        loss, main_val, aux_val = total_loss(out, labels, cfg.aux_weight, keep_mask=keep)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss {loss.item()} at iteration {it}")
        opt.zero_grad()
        loss.backward()
        lr = poly_lr(cfg.base_lr, it, cfg.iterations)
        opt.step(lr)

        if (it + 1) % eval_every == 0 or it + 1 == cfg.iterations:
            net.set_training(False)
            cm, _ = evaluate(net, ds.images["val"], ds.labels["val"],
                             ds.class_count, batch_size=cfg.batch_size)
            val, _ = miou(cm)
            rows.append((it + 1, lr, main_val, aux_val, val))
            if progress:
                progress(it + 1, lr, main_val, aux_val, val)
            if val > best[0]:
                best = (val, {n: t.data.copy() for n, t in net.named_tensors()})

    os.makedirs(out_dir, exist_ok=True)
    if best[1] is None:  # zero-iteration run: checkpoint equals initialization
        best = (0.0, {n: t.data.copy() for n, t in net.named_tensors()})
    meta = {"config": cfg.as_dict(), "best_val_miou": best[0]}
    ckpt_path = os.path.join(out_dir, checkpoint_name)
    save_checkpoint(ckpt_path, best[1], meta)
    log_path = os.path.join(out_dir, log_name)
    write_csv(log_path, ("iter", "lr", "loss_main", "loss_aux", "val_miou"), rows)
    return ckpt_path, log_path, best[0]
