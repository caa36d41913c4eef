"""Convolutional critic, the gradient-penalty Wasserstein loss, and training."""
from __future__ import annotations

import csv
import io
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError, NumericalAbort
from .metrics_io import atomic_write_text, read_egrid
from .nn import RMSProp, he_normal, load_checkpoint, save_checkpoint
from .seeding import derive_seed

log = logging.getLogger(__name__)

# (out_channels, kernel, stride, pad); the first conv's input is one channel
CONV_LAYERS = (
    (16, 5, 1, 2),
    (32, 5, 1, 2),
    (32, 3, 2, 1),
    (64, 3, 2, 1),
    (64, 3, 2, 1),
    (128, 3, 2, 1),
)
HIDDEN = 256


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    mu: float = 5.0
    lr: float = 1e-4
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be at least 2")
        if self.mu < 0:
            raise InvalidInputError("mu must be non-negative")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")


class CriticNet:
    """Six convolutions (two plain, four stride-2) then two dense layers.

    Leaky ReLU follows every convolution; the dense layers are linear. The
    output is one score per image.
    """

    def __init__(self, image_shape=(32, 32), seed: int = 0, slope: float = 0.2,
                 conv_layers=CONV_LAYERS, hidden: int = HIDDEN, zero_last: bool = False):
        self.image_shape = tuple(int(n) for n in image_shape)
        self.slope = slope
        self.conv_layers = tuple(tuple(layer) for layer in conv_layers)
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        c_in = 1
        h, w = self.image_shape
        for i, (c_out, k, stride, pad) in enumerate(self.conv_layers):
            self._add(f"conv{i}.weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
            self._add(f"conv{i}.bias", np.zeros((1, c_out, 1, 1)))
            h = ad.conv_output_size(h, k, stride, pad)
            w = ad.conv_output_size(w, k, stride, pad)
            if h < 1 or w < 1:
                raise InvalidInputError(f"image {self.image_shape} too small for the critic")
            c_in = c_out
        flat = c_in * h * w
        self._add("dense0.weight", he_normal(rng, (flat, hidden), flat))
        self._add("dense0.bias", np.zeros((1, hidden)))
        last = np.zeros((hidden, 1)) if zero_last else he_normal(rng, (hidden, 1), hidden)
        self._add("dense1.weight", last)
        self._add("dense1.bias", np.zeros((1, 1)))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        """(B, 1, H, W) -> (B, 1)."""
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != self.image_shape:
            raise InvalidInputError(
                f"critic expects (B, 1, {self.image_shape[0]}, {self.image_shape[1]}), got {x.shape}")
        p = self.params
        h = x
        for i, (_, _, stride, pad) in enumerate(self.conv_layers):
            h = ad.conv2d(h, p[f"conv{i}.weight"], stride, pad) + p[f"conv{i}.bias"]
            h = ad.leaky_relu(h, self.slope)
        h = ad.dense(ad.flatten(h), p["dense0.weight"], p["dense0.bias"])
        return ad.dense(h, p["dense1.weight"], p["dense1.bias"])

    __call__ = forward

    def score(self, images) -> np.ndarray:
        with ad.no_grad():
            return self.forward(Tensor(_as_batch(images, self.image_shape))).data[:, 0]

    def score_and_input_grad(self, image) -> tuple[float, np.ndarray]:
        """Score of one image and its gradient with respect to the pixels."""
        x = Tensor(_as_batch(image, self.image_shape), requires_grad=True)
        out = self.forward(x)
        (g,) = ad.grad(ad.tsum(out), [x])
        return float(out.data[0, 0]), g.data[0, 0]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        state["meta.image_shape"] = np.array(self.image_shape, dtype=np.float64)
        state["meta.slope"] = np.array([self.slope])
        return state

    def load_state_dict(self, state) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise InvalidInputError(f"checkpoint lacks {name}")
            if state[name].shape != p.shape:
                raise InvalidInputError(f"{name}: checkpoint {state[name].shape} vs net {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "CriticNet":
        state = load_checkpoint(path)
        shape = tuple(int(v) for v in state["meta.image_shape"])
        net = cls(shape, slope=float(state["meta.slope"][0]))
        net.load_state_dict(state)
        return net


def _as_batch(images, image_shape) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(image_shape)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def critic_score(net: CriticNet, x) -> float | np.ndarray:
    scores = net.score(x)
    return float(scores[0]) if np.asarray(x).ndim <= 2 else scores


def gradient_penalty_terms(net: CriticNet, x_i: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-sample ``||grad_x C(x_i)||`` and the hinge ``(norm - 1)_+^2``,
    kept differentiable in the weights."""
    xi = Tensor(x_i, requires_grad=True)
    (g,) = ad.grad(ad.tsum(net(xi)), [xi], create_graph=True)
    norms = ad.l2_norm(g, axis=(1, 2, 3))
    return norms, ad.relu(norms - 1.0) ** 2


def wgan_batch_loss(net: CriticNet, x_r, x_n, mu: float, rng: np.random.Generator | None = None,
                    nu=None, with_grads: bool = True) -> dict:
    """mean C(x_r) - mean C(x_n) + mu * mean((||grad C(x_i)|| - 1)_+^2).

    ``x_i = nu * x_r + (1 - nu) * x_n`` with one ``nu ~ U[0, 1]`` per pair.
    Returns the loss and its parts as floats, plus weight gradients.
    """
    x_r = _as_batch(x_r, net.image_shape)
    x_n = _as_batch(x_n, net.image_shape)
    if x_r.shape != x_n.shape:
        raise InvalidInputError(f"clean batch {x_r.shape} and noisy batch {x_n.shape} differ")
    if x_r.shape[0] == 0:
        raise InvalidInputError("empty batch")
    b = x_r.shape[0]
    if nu is None:
        nu = (rng if rng is not None else np.random.default_rng()).uniform(size=b)
    nu = np.broadcast_to(np.asarray(nu, dtype=np.float64), (b,)).reshape(b, 1, 1, 1)
    x_i = nu * x_r + (1.0 - nu) * x_n

    scores = net(Tensor(np.concatenate([x_r, x_n])))
    score_r = ad.mean(ad.take(scores, 0, b))
    score_n = ad.mean(ad.take(scores, b, 2 * b))
    norms, hinge = gradient_penalty_terms(net, x_i)
    penalty = ad.mean(hinge)
    loss = score_r - score_n + mu * penalty

    out = {"loss": loss.item(), "gap": score_n.item() - score_r.item(),
           "penalty": penalty.item(), "grad_norms": norms.data.copy(), "loss_tensor": loss}
    if with_grads:
        names = list(net.params)
        grads = ad.grad(loss, [net.params[k] for k in names])
        out["grads"] = dict(zip(names, grads))
    return out


def dataset_sampler(clean: np.ndarray, noisy: np.ndarray, batch_size: int,
                    rng: np.random.Generator) -> Callable[[], tuple[np.ndarray, np.ndarray]]:
    """Unpaired batches: each pool is walked in its own shuffled order."""
    state = {"clean": [], "noisy": []}
    pools = {"clean": clean, "noisy": noisy}

    def draw(key):
        idx = []
        while len(idx) < batch_size:
            if not state[key]:
                state[key] = list(rng.permutation(len(pools[key])))
            idx.append(state[key].pop())
        return pools[key][idx]

    return lambda: (draw("clean"), draw("noisy"))


def train_steps(net: CriticNet, sampler, steps: int, cfg: TrainConfig,
                rng: np.random.Generator, optimizer: RMSProp | None = None) -> list[dict]:
    optimizer = optimizer or RMSProp(lr=cfg.lr)
    trace = []
    for step in range(steps):
        x_r, x_n = sampler()
        try:
            res = wgan_batch_loss(net, x_r, x_n, cfg.mu, rng)
        except FloatingPointError as exc:
            raise NumericalAbort(f"critic training diverged at step {step}: {exc}") from exc
        if not np.isfinite(res["loss"]):
            raise NumericalAbort(f"critic loss is {res['loss']} at step {step}")
        optimizer.step(net.params, res["grads"])
        trace.append({"step": step, "loss": res["loss"], "gap": res["gap"], "penalty": res["penalty"]})
        if step % 50 == 0:
            log.info("step %d loss %.5g gap %.5g penalty %.3g", step, res["loss"], res["gap"], res["penalty"])
    return trace


def steps_for(cfg: TrainConfig, n_images: int) -> int:
    per_epoch = max(1, n_images // cfg.batch_size)
    steps = cfg.epochs * per_epoch
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def train_critic_arrays(clean: np.ndarray, noisy: np.ndarray, cfg: TrainConfig,
                        net: CriticNet | None = None) -> tuple[CriticNet, list[dict]]:
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if len(clean) == 0 or len(noisy) == 0:
        raise InvalidInputError("both clean and noisy image sets must be nonempty")
    if clean.shape[1:] != noisy.shape[1:]:
        raise InvalidInputError(f"clean images {clean.shape[1:]} vs noisy {noisy.shape[1:]}")
    if net is None:
        net = CriticNet(clean.shape[1:], seed=derive_seed(cfg.seed, "critic/init"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "critic/batches"))
    sampler = dataset_sampler(clean, noisy, cfg.batch_size, rng)
    trace = train_steps(net, sampler, steps_for(cfg, max(len(clean), len(noisy))), cfg, rng)
    return net, trace


def load_image_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("*.egrid"))
    if not files:
        raise InvalidInputError(f"no .egrid images in {path}")
    return np.stack([read_egrid(f)[:, :, 0].astype(np.float64) for f in files])


def trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "gap", "penalty"])
    for row in trace:
        writer.writerow([row["step"], repr(row["loss"]), repr(row["gap"]), repr(row["penalty"])])
    return buf.getvalue()


def train_critic(clean_dir, noisy_dir, cfg: TrainConfig, out_dir) -> tuple[CriticNet, list[dict]]:
    """Train on two EGRID directories; write ``critic.eckp`` and ``loss_trace.csv``."""
    net, trace = train_critic_arrays(load_image_dir(clean_dir), load_image_dir(noisy_dir), cfg)
    out = Path(out_dir)
    net.save(out / "critic.eckp")
    atomic_write_text(out / "loss_trace.csv", trace_csv(trace))
    return net, trace
