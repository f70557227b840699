"""Configurable inception-style convolutional classifier with hand-written
forward/backward passes, softmax cross-entropy + L2 loss, Nesterov-momentum
SGD, and a binary checkpoint format.

All tensors are NHWC numpy arrays; float32 for training, float64 available
for gradient verification.
"""

import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"UTNC"
CHECKPOINT_VERSION = 1


class NetworkError(Exception):
    pass


class DivergedError(NetworkError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class InceptionBlockSpec:
    """Branch widths for one block: 1x1; 1x1->3x3; 1x1->3x3->3x3; pool->1x1."""
    b1: int = 16
    b3_reduce: int = 12
    b3: int = 16
    b5_reduce: int = 8
    b5: int = 8
    pool_proj: int = 8
    pool_after: bool = False

    @property
    def out_channels(self):
        return self.b1 + self.b3 + self.b5 + self.pool_proj


@dataclass(frozen=True)
class ArchitectureConfig:
    num_classes: int
    input_size: int = 224
    stem_channels: int = 32
    blocks: tuple = (InceptionBlockSpec(), InceptionBlockSpec(pool_after=True))
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.num_classes < 1:
            raise NetworkError("num_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetworkError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, InceptionBlockSpec) else InceptionBlockSpec(**b)
            for b in self.blocks))

    def to_dict(self):
        return {"num_classes": self.num_classes, "input_size": self.input_size,
                "stem_channels": self.stem_channels,
                "blocks": [asdict(b) for b in self.blocks],
                "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, d):
        return cls(num_classes=d["num_classes"], input_size=d["input_size"],
                   stem_channels=d["stem_channels"],
                   blocks=tuple(InceptionBlockSpec(**b) for b in d["blocks"]),
                   dropout_rate=d["dropout_rate"])


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.05
    lr_decay_per_epoch: float = 0.94
    momentum: float = 0.9
    l2_per_sample: float = 0.0001
    batch_size: int = 64
    epochs: int = 150

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise NetworkError("momentum must lie in [0, 1)")
        if self.base_lr < 0 or self.l2_per_sample < 0:
            raise NetworkError("base_lr and l2 must be >= 0")


# ---------------------------------------------------------------------------
# primitive layers

def conv2d_forward(x, w, stride=1, pad=0):
    n, h, wd, _ = x.shape
    kh, kw, cin, f = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = np.empty((n, oh, ow, kh, kw, cin), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * oh:stride,
                                          kj:kj + stride * ow:stride, :]
    out = cols.reshape(n * oh * ow, -1) @ w.reshape(-1, f)
    return out.reshape(n, oh, ow, f), (x.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, pad = cache
    n, oh, ow, f = dout.shape
    kh, kw, cin, _ = w.shape
    dw = (cols.reshape(-1, kh * kw * cin).T @ dout.reshape(-1, f)).reshape(w.shape)
    dcols = (dout.reshape(-1, f) @ w.reshape(-1, f).T).reshape(n, oh, ow, kh, kw, cin)
    hp = x_shape[1] + 2 * pad
    wp = x_shape[2] + 2 * pad
    dxp = np.zeros((n, hp, wp, cin), dtype=dout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :] += \
                dcols[:, :, :, ki, kj, :]
    dx = dxp[:, pad:hp - pad, pad:wp - pad, :] if pad else dxp
    return dx, dw


def bn_forward(x, gamma, beta, running_mean, running_var, train):
    if train:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        new_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mu
        new_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, gamma, inv_std, train), (new_mean, new_var)


def bn_backward(dout, cache):
    xhat, gamma, inv_std, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dx = (inv_std / m) * (m * dxhat
                          - dxhat.sum(axis=(0, 1, 2))
                          - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def avgpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise NetworkError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    return out, x.shape


def avgpool2_backward(dout, x_shape):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) / 4.0


def avgpool3_same_forward(x):
    """3x3 stride-1 average pool, zero padded (count includes padding)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x)
    for ki in range(3):
        for kj in range(3):
            out += xp[:, ki:ki + h, kj:kj + w, :]
    return out / 9.0, x.shape


def avgpool3_same_backward(dout, x_shape):
    n, h, w, c = x_shape
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
    g = dout / 9.0
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + h, kj:kj + w, :] += g
    return dxp[:, 1:1 + h, 1:1 + w, :]


def global_avgpool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avgpool_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


def dropout_forward(x, rate, rng):
    if rate <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(x.dtype)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# model

def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class InceptionNet:
    """Stem conv + configurable inception blocks + average-pool head."""

    def __init__(self, arch, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._layout = self._build_layout()

    def _build_layout(self):
        # name -> (kind, shape-producing info); resolved in init_params
        layout = []
        c = self.arch.stem_channels
        layout.append(("stem", 3, c, 3, 2, 1))  # (prefix, cin, cout, k, stride, pad)
        cin = c
        for i, blk in enumerate(self.arch.blocks):
            p = f"block{i}"
            layout.append((f"{p}.b1", cin, blk.b1, 1, 1, 0))
            layout.append((f"{p}.b3r", cin, blk.b3_reduce, 1, 1, 0))
            layout.append((f"{p}.b3", blk.b3_reduce, blk.b3, 3, 1, 1))
            layout.append((f"{p}.b5r", cin, blk.b5_reduce, 1, 1, 0))
            layout.append((f"{p}.b5a", blk.b5_reduce, blk.b5, 3, 1, 1))
            layout.append((f"{p}.b5b", blk.b5, blk.b5, 3, 1, 1))
            layout.append((f"{p}.pool", cin, blk.pool_proj, 1, 1, 0))
            cin = blk.out_channels
        self.feature_channels = cin
        return layout

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        params, stats = {}, {}
        for prefix, cin, cout, k, _, _ in self._layout:
            fan_in = k * k * cin
            params[f"{prefix}.W"] = _he_uniform(rng, (k, k, cin, cout), fan_in, self.dtype)
            params[f"{prefix}.gamma"] = np.ones(cout, dtype=self.dtype)
            params[f"{prefix}.beta"] = np.zeros(cout, dtype=self.dtype)
            stats[f"{prefix}.mean"] = np.zeros(cout, dtype=self.dtype)
            stats[f"{prefix}.var"] = np.ones(cout, dtype=self.dtype)
        params["dense.W"] = _he_uniform(rng, (self.feature_channels, self.arch.num_classes),
                                        self.feature_channels, self.dtype)
        params["dense.b"] = np.zeros(self.arch.num_classes, dtype=self.dtype)
        return params, stats

    def _conv_bn_relu(self, x, params, stats, prefix, stride, pad, train, new_stats):
        h, conv_cache = conv2d_forward(x, params[f"{prefix}.W"], stride, pad)
        h, bn_cache, (nm, nv) = bn_forward(h, params[f"{prefix}.gamma"],
                                           params[f"{prefix}.beta"],
                                           stats[f"{prefix}.mean"],
                                           stats[f"{prefix}.var"], train)
        new_stats[f"{prefix}.mean"] = nm.astype(self.dtype)
        new_stats[f"{prefix}.var"] = nv.astype(self.dtype)
        h, relu_mask = relu_forward(h)
        return h, (prefix, conv_cache, bn_cache, relu_mask)

    def forward(self, params, stats, x, train=False, dropout_rng=None):
        """Returns (probabilities, cache, updated_bn_stats)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.arch.input_size \
                or x.shape[2] != self.arch.input_size or x.shape[3] != 3:
            raise NetworkError(
                f"expected (N, {self.arch.input_size}, {self.arch.input_size}, 3) "
                f"input, got {x.shape}")
        new_stats = {}
        cache = {"blocks": []}

        h, cbr = self._conv_bn_relu(x, params, stats, "stem", 2, 1, train, new_stats)
        cache["stem"] = cbr
        h, pshape = avgpool2_forward(h)
        cache["stem_pool"] = pshape

        for i, blk in enumerate(self.arch.blocks):
            p = f"block{i}"
            b1, c1 = self._conv_bn_relu(h, params, stats, f"{p}.b1", 1, 0, train, new_stats)
            b3, c3r = self._conv_bn_relu(h, params, stats, f"{p}.b3r", 1, 0, train, new_stats)
            b3, c3 = self._conv_bn_relu(b3, params, stats, f"{p}.b3", 1, 1, train, new_stats)
            b5, c5r = self._conv_bn_relu(h, params, stats, f"{p}.b5r", 1, 0, train, new_stats)
            b5, c5a = self._conv_bn_relu(b5, params, stats, f"{p}.b5a", 1, 1, train, new_stats)
            b5, c5b = self._conv_bn_relu(b5, params, stats, f"{p}.b5b", 1, 1, train, new_stats)
            bp, pool_shape = avgpool3_same_forward(h)
            bp, cp = self._conv_bn_relu(bp, params, stats, f"{p}.pool", 1, 0, train, new_stats)
            h = np.concatenate([b1, b3, b5, bp], axis=3)
            block_cache = {"branches": (c1, c3r, c3, c5r, c5a, c5b, cp),
                           "pool_shape": pool_shape,
                           "splits": (blk.b1, blk.b3, blk.b5, blk.pool_proj),
                           "pool_after": None}
            if blk.pool_after:
                h, pshape = avgpool2_forward(h)
                block_cache["pool_after"] = pshape
            cache["blocks"].append(block_cache)

        feat, gap_shape = global_avgpool_forward(h)
        cache["gap"] = gap_shape
        if train and self.arch.dropout_rate > 0:
            if dropout_rng is None:
                dropout_rng = np.random.default_rng(0)
            feat, dmask = dropout_forward(feat, self.arch.dropout_rate, dropout_rng)
        else:
            dmask = None
        cache["dropout"] = dmask
        logits, dense_cache = dense_forward(feat, params["dense.W"], params["dense.b"])
        cache["dense"] = dense_cache
        probs = softmax(logits)
        cache["probs"] = probs
        return probs, cache, new_stats

    def loss(self, probs, labels, params=None, l2_per_sample=0.0):
        """Mean cross entropy plus the L2 penalty on weight tensors."""
        p = np.clip(probs[np.arange(len(labels)), labels], PROB_FLOOR, None)
        ce = float(-np.log(p).mean())
        if l2_per_sample and params is not None:
            ce += l2_per_sample * sum(float((v.astype(np.float64) ** 2).sum())
                                      for k, v in params.items() if k.endswith(".W"))
        return ce

    def backward(self, params, cache, labels, l2_per_sample=0.0):
        """Gradients of loss() for every trainable tensor."""
        probs = cache["probs"]
        n = probs.shape[0]
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n

        grads = {}
        dfeat, grads["dense.W"], grads["dense.b"] = dense_backward(dlogits, cache["dense"])
        dfeat = dropout_backward(dfeat, cache["dropout"])
        dh = global_avgpool_backward(dfeat, cache["gap"])

        def back_cbr(dout, cbr):
            prefix, conv_cache, bn_cache, relu_mask = cbr
            dout = relu_backward(dout, relu_mask)
            dout, dgamma, dbeta = bn_backward(dout, bn_cache)
            dout, dw = conv2d_backward(dout, conv_cache)
            grads[f"{prefix}.W"] = dw
            grads[f"{prefix}.gamma"] = dgamma
            grads[f"{prefix}.beta"] = dbeta
            return dout

        for block_cache in reversed(cache["blocks"]):
            if block_cache["pool_after"] is not None:
                dh = avgpool2_backward(dh, block_cache["pool_after"])
            s1, s3, s5, sp = block_cache["splits"]
            d1 = dh[..., :s1]
            d3 = dh[..., s1:s1 + s3]
            d5 = dh[..., s1 + s3:s1 + s3 + s5]
            dp = dh[..., s1 + s3 + s5:]
            c1, c3r, c3, c5r, c5a, c5b, cp = block_cache["branches"]
            din = back_cbr(d1, c1)
            d3 = back_cbr(d3, c3)
            din = din + back_cbr(d3, c3r)
            d5 = back_cbr(d5, c5b)
            d5 = back_cbr(d5, c5a)
            din = din + back_cbr(d5, c5r)
            dp = back_cbr(dp, cp)
            din = din + avgpool3_same_backward(dp, block_cache["pool_shape"])
            dh = din

        dh = avgpool2_backward(dh, cache["stem_pool"])
        back_cbr(dh, cache["stem"])

        if l2_per_sample:
            for k in grads:
                if k.endswith(".W"):
                    grads[k] = grads[k] + 2.0 * l2_per_sample * params[k]
        return grads


# ---------------------------------------------------------------------------
# optimizer

def sgd_nesterov_step(params, velocities, gradients_at_lookahead, lr, momentum):
    """v <- mu*v - lr*g ; theta <- theta + v.

    Gradients must have been evaluated at the lookahead point
    theta + mu*v (see lookahead_params).
    """
    for k, g in gradients_at_lookahead.items():
        v = momentum * velocities[k] - lr * g
        velocities[k] = v.astype(params[k].dtype)
        params[k] = params[k] + velocities[k]
    return params, velocities


def lookahead_params(params, velocities, momentum):
    if momentum == 0.0:
        return params
    return {k: params[k] + momentum * velocities[k] for k in params}


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    arch: ArchitectureConfig
    params: dict
    stats: dict
    velocities: dict
    epoch: int = 0
    seed: int = 0

    def save(self, path):
        tensors = []
        blobs = []
        for kind, table in (("param", self.params), ("stat", self.stats),
                            ("velocity", self.velocities)):
            for name in sorted(table):
                arr = np.ascontiguousarray(table[name], dtype="<f4")
                tensors.append({"name": name, "kind": kind,
                                "shape": list(arr.shape)})
                blobs.append(arr.tobytes())
        header = json.dumps({"architecture": self.arch.to_dict(),
                             "training": {"epoch": self.epoch, "seed": self.seed},
                             "tensors": tensors}, sort_keys=True).encode()
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise NetworkError(f"bad checkpoint magic: {magic!r}")
            version, = struct.unpack("<I", f.read(4))
            if version != CHECKPOINT_VERSION:
                raise NetworkError(f"unsupported checkpoint version {version}")
            hlen, = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            tables = {"param": {}, "stat": {}, "velocity": {}}
            for t in header["tensors"]:
                count = int(np.prod(t["shape"])) if t["shape"] else 1
                data = np.frombuffer(f.read(count * 4), dtype="<f4")
                tables[t["kind"]][t["name"]] = data.reshape(t["shape"]).copy()
        return cls(arch=ArchitectureConfig.from_dict(header["architecture"]),
                   params=tables["param"], stats=tables["stat"],
                   velocities=tables["velocity"],
                   epoch=header["training"]["epoch"],
                   seed=header["training"]["seed"])


# ---------------------------------------------------------------------------
# training / evaluation

def _topk_hits(probs, labels, k):
    # Stable sort on -prob: ties resolve toward the lower class index.
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate_arrays(net, params, stats, batch_iter):
    hits1 = hits5 = total = 0
    k5 = min(5, net.arch.num_classes)
    for batch in batch_iter:
        probs, _, _ = net.forward(params, stats, batch.inputs, train=False)
        hits1 += int(_topk_hits(probs, batch.labels, 1).sum())
        hits5 += int(_topk_hits(probs, batch.labels, k5).sum())
        total += len(batch.labels)
    if total == 0:
        raise NetworkError("evaluation split is empty")
    return hits1 / total, hits5 / total


def evaluate(checkpoint, manifest, split="val", batch_size=64, image_loader=None):
    from .dataset import batches
    net = InceptionNet(checkpoint.arch)
    it = batches(manifest, split, batch_size=batch_size, seed=0, epoch=0,
                 crop=checkpoint.arch.input_size, image_loader=image_loader)
    return evaluate_arrays(net, checkpoint.params, checkpoint.stats, it)


def train(manifest, arch, opt, seed=0, out_dir=None, image_loader=None,
          log=None, checkpoint_every=1):
    """Full training loop; returns (Checkpoint, metrics rows).

    Metrics rows are dicts with epoch, train_loss, val_top1, val_top5, lr,
    seconds; also written to metrics.csv under out_dir when given.
    """
    from .dataset import batches
    if len(manifest.class_index) < 1:
        raise NetworkError("training needs at least 1 class")
    net = InceptionNet(arch)
    params, stats = net.init_params(seed)
    velocities = {k: np.zeros_like(v) for k, v in params.items()}
    dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    metrics = []
    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w") as f:
            f.write("epoch,train_loss,val_top1,val_top5,lr,seconds\n")

    for epoch in range(opt.epochs):
        t0 = time.time()
        lr = opt.base_lr * opt.lr_decay_per_epoch ** epoch
        losses = []
        for bi, batch in enumerate(batches(manifest, "train", opt.batch_size,
                                           seed=seed, epoch=epoch,
                                           crop=arch.input_size,
                                           image_loader=image_loader)):
            ahead = lookahead_params(params, velocities, opt.momentum)
            probs, cache, new_stats = net.forward(ahead, stats, batch.inputs,
                                                  train=True, dropout_rng=dropout_rng)
            stats.update(new_stats)
            loss_val = net.loss(probs, batch.labels, ahead, opt.l2_per_sample)
            if not np.isfinite(loss_val):
                raise DivergedError(epoch, bi, loss_val)
            losses.append(loss_val)
            grads = net.backward(ahead, cache, batch.labels, opt.l2_per_sample)
            params, velocities = sgd_nesterov_step(params, velocities, grads,
                                                   lr, opt.momentum)
        val_top1, val_top5 = evaluate_arrays(
            net, params, stats,
            batches(manifest, "val", opt.batch_size, seed=seed, epoch=0,
                    crop=arch.input_size, image_loader=image_loader))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_top1": val_top1, "val_top5": val_top5, "lr": lr,
               "seconds": time.time() - t0}
        metrics.append(row)
        if log:
            log(row)
        if metrics_path:
            with open(metrics_path, "a") as f:
                f.write(f"{epoch},{row['train_loss']:.6f},{val_top1:.6f},"
                        f"{val_top5:.6f},{lr:.6g},{row['seconds']:.2f}\n")
        if out_dir and (epoch + 1) % checkpoint_every == 0:
            Checkpoint(arch, params, stats, velocities, epoch=epoch,
                       seed=seed).save(os.path.join(out_dir, "checkpoint.bin"))

    ckpt = Checkpoint(arch, params, stats, velocities,
                      epoch=opt.epochs - 1, seed=seed)
    if out_dir:
        ckpt.save(os.path.join(out_dir, "checkpoint.bin"))
    return ckpt, metrics
