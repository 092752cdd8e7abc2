"""Model assembly, loss, and the coupled training step.

The training step wires everything together per iteration: forward through
the mixed real/binary net, total loss L = L_S + lambda * sum(G) over binary
layers, backward for the task gradients, then the update sequence computed
entirely from pre-update state: scale step, Adam step on the latent weights,
backtracking correction, gain update, snapshot.

A separate baseline step trains the same architecture as a plain
estimator-based BNN with task-gradient scale updates only; with lambda = 0
and tau = 1 the coupled step is bitwise identical to it.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from binnet.bilinear import grad_G_wrt_A, grad_G_wrt_w, objective_G
from binnet.binary import ScaleDiag
from binnet.layers import (
    BatchNorm2d,
    BinaryConv2d,
    Flatten,
    Linear,
    MaxPool2d,
    PReLU,
    RealConv2d,
)
from binnet.updates import (
    BacktrackState,
    backtrack_w,
    density_mask,
    drelu,
    grad_U,
    update_A,
    update_U,
)

WEIGHT_DECAY_REAL = 1e-5


# Smallest float32 value >= the 1e-8 scale floor.
_FLOOR32 = np.nextafter(np.float32(1e-8), np.float32(1.0))


def _round32_scale(scale):
    """Keep inv_alpha float32-representable (checkpoint payloads are f32)."""
    return ScaleDiag(
        np.maximum(scale.inv_alpha.astype(np.float32), _FLOOR32).astype(np.float64)
    )


class NonFiniteLossError(RuntimeError):
    def __init__(self, layer_index, layer_kind):
        self.layer_index = layer_index
        self.layer_kind = layer_kind
        super().__init__(
            f"non-finite values first appeared at layer {layer_index} ({layer_kind})"
        )


@dataclass
class TrainConfig:
    lam: float = 1e-4
    tau: float = 0.6
    eta1: float = 1e-3
    eta2: float = 1e-3
    eta3: float = 1e-4
    estimator: str = "ste"
    regularizer: str = "l2"
    epochs: int = 5
    batch_size: int = 100
    seed: int = 0
    lr_schedule: str = "cosine"

    def validate(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if min(self.eta1, self.eta2, self.eta3) <= 0:
            raise ValueError("learning rates must be positive")
        if self.estimator not in ("ste", "approxsign"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.regularizer not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        return self


@dataclass
class Network:
    layers: list
    input_shape: tuple
    n_classes: int

    def binary_layers(self):
        return [l for l in self.layers if isinstance(l, BinaryConv2d)]


def build_bincnn4(in_channels, image_size, n_classes, cfg, rng, dtype=np.float32):
    """Four-block desk-scale net: real conv stem, two binary conv blocks with
    a pool between them, real linear head."""
    est = cfg.estimator
    layers = [
        RealConv2d(in_channels, 16, 3, padding=1, rng=rng, dtype=dtype),
        BatchNorm2d(16, dtype=dtype),
        PReLU(16, dtype=dtype),
        BinaryConv2d(16, 32, 3, padding=1, rng=rng, dtype=dtype, estimator=est),
        BatchNorm2d(32, dtype=dtype),
        PReLU(32, dtype=dtype),
        MaxPool2d(2),
        BinaryConv2d(32, 64, 3, padding=1, rng=rng, dtype=dtype, estimator=est),
        BatchNorm2d(64, dtype=dtype),
        PReLU(64, dtype=dtype),
        Flatten(),
        Linear(64 * (image_size // 2) ** 2, n_classes, rng=rng, dtype=dtype),
    ]
    return Network(layers, (in_channels, image_size, image_size), n_classes)


def forward(net, batch, train=False):
    x = np.asarray(batch)
    if x.shape[1:] != net.input_shape:
        raise ValueError(
            f"batch geometry {x.shape[1:]} does not match net input {net.input_shape}"
        )
    for layer in net.layers:
        x = layer.forward(x, train)
    return x


def _find_nonfinite_layer(net, batch):
    x = np.asarray(batch)
    for i, layer in enumerate(net.layers):
        x = layer.forward(x, False)
        if not np.all(np.isfinite(x)):
            return i, layer.kind
    return len(net.layers) - 1, net.layers[-1].kind


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, max-stabilized. Returns (loss, grad)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), labels]))
    soft = np.exp(z - logsumexp[:, None])
    soft[np.arange(b), labels] -= 1.0
    grad = (soft / b).astype(logits.dtype)
    return loss, grad


class Adam:
    """Plain Adam, one moment pair per registered parameter id."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, key, param, grad, lr, weight_decay=0.0):
        """Return the updated parameter (float64 math, caller casts)."""
        g = np.asarray(grad, dtype=np.float64)
        p = np.asarray(param, dtype=np.float64)
        if weight_decay:
            g = g + weight_decay * p
        if key not in self.m:
            self.m[key] = np.zeros_like(p)
            self.v[key] = np.zeros_like(p)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
        mhat = self.m[key] / (1 - self.beta1 ** t)
        vhat = self.v[key] / (1 - self.beta2 ** t)
        return p - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class StepMetrics:
    loss_task: float
    g_total: float
    loss_total: float
    drelu_rows: list = field(default_factory=list)


def _update_real_layers(net, opt, eta2):
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BinaryConv2d) or not layer.trainable:
            continue
        decay_keys = ("w",) if layer.kind in ("real-conv", "real-linear") else ()
        for name, param in layer.params().items():
            grad = layer.grads()[name]
            wd = WEIGHT_DECAY_REAL if name in decay_keys else 0.0
            new = opt.step((i, name), param, grad, eta2, weight_decay=wd)
            setattr(layer, _param_attr(layer, name), new.astype(param.dtype))


def _param_attr(layer, name):
    # Parameter dict keys match attribute names on every layer.
    assert hasattr(layer, name)
    return name


def _check_drelu_invariants(w2d, scale, tau, gated):
    """In-loop structural check: every nonzero gated row passes the density
    gate, and the flagged count matches C_out - int(C_out * tau) when
    values are pairwise distinct."""
    norms = np.sum(np.abs(w2d), axis=1)
    mask_w = density_mask(norms, tau).mask
    mask_a = density_mask(scale.inv_alpha, tau).mask
    keep = (~mask_w) & mask_a
    nonzero = np.any(gated != 0.0, axis=1)
    if not np.all(~nonzero | keep):
        raise AssertionError("gated row active outside its density support")
    c_out = len(norms)
    for values, mask in ((norms, mask_w), (scale.inv_alpha, mask_a)):
        if len(np.unique(values)) == c_out:
            expected = c_out - int(c_out * tau)
            if int(mask.sum()) != expected:
                raise AssertionError(
                    f"density count {int(mask.sum())} != expected {expected}"
                )


def training_step(net, batch, labels, cfg, opt, eta1=None, eta2=None,
                  assert_invariants=False):
    """One coupled-update iteration. Returns StepMetrics."""
    eta1 = cfg.eta1 if eta1 is None else eta1
    eta2 = cfg.eta2 if eta2 is None else eta2
    logits = forward(net, batch, train=True)
    loss_s, gloss = cross_entropy(logits, labels)
    if not math.isfinite(loss_s):
        idx, kind = _find_nonfinite_layer(net, batch)
        raise NonFiniteLossError(idx, kind)

    g_total = 0.0
    if cfg.lam != 0.0:
        for layer in net.binary_layers():
            g_total += objective_G(layer.w2d().astype(np.float64), layer.scale,
                                   cfg.regularizer)

    grad = gloss
    for layer in reversed(net.layers):
        grad = layer.backward(grad)

    drelu_rows = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BinaryConv2d):
            continue
        w_t = layer.w2d().astype(np.float64)
        a_t = layer.scale
        state = layer.state

        grad_a = layer.gA_task
        grad_w = layer.gw_task
        if cfg.lam != 0.0:
            grad_a = grad_a + cfg.lam * grad_G_wrt_A(w_t, a_t)
            grad_w = grad_w + cfg.lam * grad_G_wrt_w(w_t, a_t, cfg.regularizer)

        if cfg.tau < 1.0:
            g_u = grad_U(layer.gw_task, state, a_t, cfg.tau)
        layer.scale = _round32_scale(update_A(a_t, grad_a, eta1))
        w_vanilla = opt.step((i, "w"), layer.w, grad_w.reshape(layer.w.shape), eta2)
        if cfg.tau < 1.0:
            gated = drelu(w_t, a_t, cfg.tau)
            if assert_invariants:
                _check_drelu_invariants(w_t, a_t, cfg.tau, gated)
            w_next = backtrack_w(
                w_vanilla, w_t.reshape(layer.w.shape), a_t, state, cfg.tau
            )
            state = update_U(state, g_u, cfg.eta3)
            state.U = state.U.astype(np.float32).astype(np.float64)
            drelu_rows.append(int(np.count_nonzero(np.any(gated != 0.0, axis=1))))
        else:
            w_next = w_vanilla
            drelu_rows.append(0)
        state.w_prev = np.array(layer.w, dtype=np.float64)
        layer.state = state
        layer.w = w_next.astype(layer.w.dtype)

    _update_real_layers(net, opt, eta2)
    return StepMetrics(loss_s, g_total, loss_s + cfg.lam * g_total, drelu_rows)


def baseline_training_step(net, batch, labels, cfg, opt, eta1=None, eta2=None):
    """Plain estimator-based BNN step: no coupling objective, no
    backtracking, no gain updates. Scale entries still follow their
    absolute-value task-gradient step."""
    eta1 = cfg.eta1 if eta1 is None else eta1
    eta2 = cfg.eta2 if eta2 is None else eta2
    logits = forward(net, batch, train=True)
    loss_s, gloss = cross_entropy(logits, labels)
    if not math.isfinite(loss_s):
        idx, kind = _find_nonfinite_layer(net, batch)
        raise NonFiniteLossError(idx, kind)
    grad = gloss
    for layer in reversed(net.layers):
        grad = layer.backward(grad)
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BinaryConv2d):
            continue
        layer.scale = _round32_scale(update_A(layer.scale, layer.gA_task, eta1))
        w_vanilla = opt.step(
            (i, "w"), layer.w, layer.gw_task.reshape(layer.w.shape), eta2
        )
        layer.state.w_prev = np.array(layer.w, dtype=np.float64)
        layer.w = w_vanilla.astype(layer.w.dtype)
    _update_real_layers(net, opt, eta2)
    return StepMetrics(loss_s, 0.0, loss_s, [0] * len(net.binary_layers()))


def evaluate(net, images, labels, batch_size=256):
    """Top-1 accuracy in eval mode (running BN statistics)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(images), batch_size):
        logits = forward(net, images[start : start + batch_size], train=False)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return correct / len(images)


def cosine_lr(base, epoch, total_epochs):
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(total_epochs, 1)))


class Trainer:
    """Epoch loop with seeded shuffling, cosine annealing of the scale and
    weight learning rates, and a tab-separated metrics log."""

    def __init__(self, cfg, train_images, train_labels, test_images=None,
                 test_labels=None, baseline=False, assert_invariants=False,
                 log_fn=None, dtype=np.float32, n_classes=10):
        self.cfg = cfg.validate()
        self.train_images = np.asarray(train_images, dtype=dtype)
        self.train_labels = np.asarray(train_labels)
        self.test_images = None if test_images is None else np.asarray(test_images, dtype=dtype)
        self.test_labels = None if test_labels is None else np.asarray(test_labels)
        self.baseline = baseline
        self.assert_invariants = assert_invariants
        self.log_fn = log_fn or (lambda line: None)
        rng = np.random.default_rng(cfg.seed)
        c, h, w = self.train_images.shape[1:]
        if h != w:
            raise ValueError(f"expected square images, got {h}x{w}")
        self.net = build_bincnn4(c, h, n_classes, cfg, rng, dtype=dtype)
        self.data_rng = rng
        self.opt = Adam()
        self.step_count = 0
        self.history = []

    def _lr(self, base, epoch):
        if self.cfg.lr_schedule == "cosine":
            return cosine_lr(base, epoch, self.cfg.epochs)
        return base

    def run_epoch(self, epoch):
        cfg = self.cfg
        eta1 = self._lr(cfg.eta1, epoch)
        eta2 = self._lr(cfg.eta2, epoch)
        perm = self.data_rng.permutation(len(self.train_images))
        last = None
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch, labels = self.train_images[idx], self.train_labels[idx]
            if self.baseline:
                m = baseline_training_step(self.net, batch, labels, cfg, self.opt,
                                           eta1, eta2)
            else:
                m = training_step(self.net, batch, labels, cfg, self.opt, eta1,
                                  eta2, assert_invariants=self.assert_invariants)
            self.step_count += 1
            rows = ",".join(str(r) for r in m.drelu_rows)
            self.log_fn(f"{self.step_count}\t{m.loss_task:.6f}\t{m.g_total:.6f}\t\t{rows}")
            last = m
        return last

    def run(self, stop_at_accuracy=None):
        accuracy = None
        for epoch in range(self.cfg.epochs):
            self.run_epoch(epoch)
            if self.test_images is not None:
                accuracy = evaluate(self.net, self.test_images, self.test_labels)
                self.log_fn(f"{self.step_count}\t\t\t{accuracy:.4f}\t")
                self.history.append(accuracy)
                if stop_at_accuracy is not None and accuracy >= stop_at_accuracy:
                    break
        return accuracy


def distribution_report(net, bins=64):
    """Per-binary-layer text histograms of latent weights (symmetric range)
    and inv_alpha values ([0, max])."""
    lines = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BinaryConv2d):
            continue
        w = layer.w.reshape(-1).astype(np.float64)
        wmax = float(np.max(np.abs(w))) or 1.0
        w_counts, _ = np.histogram(w, bins=bins, range=(-wmax, wmax))
        inv = layer.scale.inv_alpha
        imax = float(np.max(inv)) or 1.0
        i_counts, _ = np.histogram(inv, bins=bins, range=(0.0, imax))
        lines.append(f"layer {i} ({layer.kind}) weight histogram "
                     f"range=[-{wmax:.6g},{wmax:.6g}]")
        lines.append("\t".join(str(c) for c in w_counts))
        lines.append(f"layer {i} ({layer.kind}) inv_alpha histogram "
                     f"range=[0,{imax:.6g}]")
        lines.append("\t".join(str(c) for c in i_counts))
    return "\n".join(lines)


def near_zero_fraction(net, threshold=0.1):
    """Mean over binary layers of the fraction of weights with
    |w| < threshold * max|w|."""
    fracs = []
    for layer in net.binary_layers():
        w = np.abs(layer.w.reshape(-1).astype(np.float64))
        wmax = w.max()
        if wmax == 0:
            fracs.append(1.0)
        else:
            fracs.append(float(np.mean(w < threshold * wmax)))
    return float(np.mean(fracs))
