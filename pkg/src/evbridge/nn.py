"""Small feed-forward models, probability-space losses, AdamW, checkpoints."""
from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .errors import FormatError, NumericError, RangeError, StructuralError

CKPT_MAGIC = b"EVBCKPT1"


# -- probability-space ops ----------------------------------------------

def softmax(logits: DiffValue) -> DiffValue:
    """Stable softmax: shift by max (constant w.r.t. gradient)."""
    shift = ad.DiffValue(logits.tape, np.full(logits.value.shape,
                                              logits.value.max()))
    e = ad.exp(ad.sub(logits, shift))
    total = ad.vsum(e)
    inv = ad._node(total.tape, 1.0 / total.value, (total,),
                   lambda g, tv=total.value: (-g / (tv * tv),))
    return ad.mul(e, inv)


def entropy(p: DiffValue) -> DiffValue:
    return ad.scale(ad.vsum(ad.mul(p, ad.log_floored(p))), -1.0)


def kl_div(p: DiffValue, q: DiffValue) -> DiffValue:
    logp = ad.log_floored(p)
    logq = ad.log_floored(q)
    return ad.vsum(ad.mul(p, ad.sub(logp, logq)))


def cross_entropy(p: DiffValue, label: int) -> DiffValue:
    return ad.scale(ad.log_floored(ad.pick(p, label)), -1.0)


def mse(pred: DiffValue, target: np.ndarray) -> DiffValue:
    t = DiffValue(pred.tape, target)
    return ad.vmean(ad.square(ad.sub(pred, t)))


# -- models --------------------------------------------------------------

def _init_params(dims, rng):
    """He-style init for an affine stack given [in, hidden..., out]."""
    params = {}
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"w{i}"] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
        params[f"b{i}"] = np.zeros(n_out)
    return params


class MLP:
    """Flatten -> affine(hidden) -> ReLU -> affine(out).

    Used both as a classifier head (out = num_classes logits) and, with a
    sigmoid applied by the caller, as the frame regressor.
    """

    def __init__(self, input_shape, hidden, out_dim, rng=None, params=None,
                 name="", standardize=False):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.in_dim = int(np.prod(self.input_shape))
        self.hidden = int(hidden)
        self.out_dim = int(out_dim)
        self.name = name
        # per-sample input standardization removes level/scale offsets
        # between the image and surrogate domains
        self.standardize = standardize
        if params is not None:
            self.params = params
        else:
            self.params = _init_params([self.in_dim, self.hidden, self.out_dim],
                                       rng)

    def _key(self, local):
        return f"{self.name}.{local}" if self.name else local

    def local_grads(self, grads):
        """Restrict a backward() gradient map to this model's parameters,
        keyed like self.params."""
        if not self.name:
            return {k: v for k, v in grads.items() if k in self.params}
        pre = self.name + "."
        return {k[len(pre):]: v for k, v in grads.items()
                if k.startswith(pre)}

    def forward(self, tape: Tape, x, frozen: bool = False) -> DiffValue:
        """Run the network; records on the tape.

        `x` may be a raw array or a DiffValue (gradients then flow into the
        producer of x). With frozen=True the parameters are recorded as
        plain constants, so their gradient is exactly zero.
        """
        if isinstance(x, DiffValue):
            if x.value.shape != self.input_shape and x.value.size != self.in_dim:
                raise StructuralError(
                    f"input shape {x.value.shape} incompatible with model "
                    f"expecting {self.input_shape}")
            h = x
            if x.value.shape != (self.in_dim,):
                h = ad._node(x.tape, x.value.reshape(self.in_dim), (x,),
                             lambda g, s=x.value.shape: (g.reshape(s),))
        else:
            x = np.asarray(x, dtype=np.float64)
            if x.size != self.in_dim:
                raise StructuralError(
                    f"input shape {x.shape} incompatible with model "
                    f"expecting {self.input_shape}")
            h = tape.leaf(x.reshape(self.in_dim))

        if self.standardize:
            mean = ad.vmean(h)
            centered = ad.sub(h, mean)
            var = ad.vmean(ad.square(centered))
            h = ad.mul(centered, ad.rsqrt(ad.add(var,
                                                 DiffValue(h.tape, 1e-6))))

        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w = tape.leaf(self.params[f"w{i}"],
                          key=None if frozen else self._key(f"w{i}"))
            b = tape.leaf(self.params[f"b{i}"],
                          key=None if frozen else self._key(f"b{i}"))
            h = ad.add(ad.matvec(w, h), b)
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def predict_logits(self, x) -> np.ndarray:
        """Inference path; nothing kept on a tape."""
        t = Tape()
        return self.forward(t, x, frozen=True).value

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}


class Classifier(MLP):
    """MLP mapping a flattened representation to class logits."""

    def __init__(self, input_shape, hidden, num_classes, rng=None,
                 params=None, name="", standardize=True):
        super().__init__(input_shape, hidden, num_classes, rng=rng,
                         params=params, name=name, standardize=standardize)
        self.num_classes = num_classes


# -- optimizer -----------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay adaptive moments over a named parameter dict."""

    def __init__(self, lr=1e-5, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, total_steps=None):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.t = 0
        self.m = {}
        self.v = {}

    def current_lr(self):
        """Linear decay to zero over total_steps (if configured)."""
        if not self.total_steps:
            return self.lr
        frac = max(0.0, 1.0 - self.t / self.total_steps)
        return self.lr * frac

    def step(self, params, grads):
        """One update in place; lr is read before incrementing t."""
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            m = self.m.get(key)
            if m is None:
                m = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[key] = m
            self.v[key] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[key] = p - lr * (update + self.weight_decay * p)
        return params

    def state_arrays(self):
        """Flatten optimizer state into a named-array dict for checkpoints."""
        out = {"__t": np.array([float(self.t)])}
        for k, a in self.m.items():
            out[f"m.{k}"] = a
        for k, a in self.v.items():
            out[f"v.{k}"] = a
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["__t"][0])
        self.m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}


# -- checkpoint IO -------------------------------------------------------

def save_arrays(path, arrays):
    """Binary layout: magic, version, count, then per array a name/shape
    header and a little-endian float64 payload. Byte-exact round-trip."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", 1, len(arrays)))
        for name in sorted(arrays):
            # asarray with order keeps 0-d arrays 0-d
            a = np.asarray(arrays[name], dtype=np.float64, order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.astype("<f8").tobytes())


def load_arrays(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, count = struct.unpack_from("<HI", data, 8)
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 14
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<I", data, off)
                off += 4
                shape.append(d)
            n = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(data, dtype="<f8", count=n, offset=off)
            off += n * 8
            arrays[name] = a.reshape(shape).copy()
    except (struct.error, ValueError) as e:
        raise FormatError(f"truncated checkpoint: {e}", offset=off)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset=off)
    return arrays


def gradient_check(model, loss_fn, h=1e-4, rel_tol=1e-4, abs_floor=1e-8):
    """Central finite differences over every parameter of `model`.

    loss_fn(tape) must run a fresh forward and return the scalar loss node.
    Returns the worst relative error seen; raises NumericError on NaN.
    """
    tape = Tape()
    loss = loss_fn(tape)
    grads = model.local_grads(ad.backward(tape, loss))

    worst = 0.0
    for key, p in model.params.items():
        g = grads.get(key, np.zeros_like(p))
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp = loss_fn(Tape()).item()
            p[idx] = orig - h
            lm = loss_fn(Tape()).item()
            p[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            an = g[idx]
            if not (np.isfinite(fd) and np.isfinite(an)):
                raise NumericError(f"non-finite gradient check at {key}{idx}")
            if max(abs(fd), abs(an)) < abs_floor:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an), abs_floor)
            worst = max(worst, rel)
    return worst
