"""Minimal reverse-mode autodiff over flat numpy float64 arrays.

Provides exactly the primitives the navigation agent needs: fused
linear / LSTM-cell ops, stable softmax, a Huber loss, tape-based
backprop, an Adam parameter store shared across workers, and a binary
checkpoint format.  No broadcasting, no GPU, single-threaded tapes.
"""

import logging
import struct
import threading
from contextlib import contextmanager

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FORESIT1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(Exception):
    """Raised when a checkpoint file fails the magic/length checks."""


class Tensor:
    """A flat float64 array plus the gradient slot filled by backward()."""

    __slots__ = ("data", "grad", "name", "_backward", "_tape")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        """A fresh copy with no tape linkage."""
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of operations; backward replays it in exact reverse.

    Tapes are worker-confined: one thread builds and consumes a tape.
    Use as a context manager so nested/eval code can run untaped.
    """

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        self._prev = getattr(_TLS, "tape", None)
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = self._prev
        return False


@contextmanager
def untaped():
    """Run ops without recording (inference / detached imagination)."""
    prev = getattr(_TLS, "tape", None)
    _TLS.tape = None
    try:
        yield
    finally:
        _TLS.tape = prev


def _record(out, back):
    tape = getattr(_TLS, "tape", None)
    if tape is not None:
        out._backward = back
        out._tape = tape
        tape._ops.append(back)


def _acc(t, g):
    # Additive accumulation: a value used k times gets the sum of k terms.
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# ops


def linear(x, W, b):
    """out[i] = sum_j W[i,j] * x[j] + b[i]."""
    xd, Wd, bd = x.data, W.data, b.data
    if Wd.ndim != 2 or xd.ndim != 1 or Wd.shape[1] != xd.shape[0] or bd.shape != (Wd.shape[0],):
        raise ValueError(
            f"linear: incompatible shapes W{Wd.shape} x{xd.shape} b{bd.shape}"
        )
    out = Tensor(Wd @ xd + bd)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(W, np.outer(g, xd))
        _acc(b, g)
        _acc(x, Wd.T @ g)

    _record(out, back)
    return out


def lstm_cell(x, h, c, W, b):
    """One LSTM step; gate order (input, forget, candidate, output).

    W is [4H, d_in + H], b is [4H].  Returns (h', c').
    """
    xd, hd, cd = x.data, h.data, c.data
    Wd, bd = W.data, b.data
    H = hd.shape[0]
    if Wd.shape != (4 * H, xd.shape[0] + H) or bd.shape != (4 * H,) or cd.shape != (H,):
        raise ValueError(
            f"lstm_cell: incompatible shapes W{Wd.shape} b{bd.shape} "
            f"x{xd.shape} h{hd.shape} c{cd.shape}"
        )
    xh = np.concatenate([xd, hd])
    z = Wd @ xh + bd
    i = 1.0 / (1.0 + np.exp(-z[:H]))
    f = 1.0 / (1.0 + np.exp(-z[H:2 * H]))
    g = np.tanh(z[2 * H:3 * H])
    o = 1.0 / (1.0 + np.exp(-z[3 * H:]))
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_out = Tensor(o * tc)
    c_out = Tensor(c_new)

    def back():
        gh = h_out.grad
        gc = c_out.grad
        if gh is None and gc is None:
            return
        gc_total = np.zeros_like(c_new) if gc is None else gc.copy()
        if gh is not None:
            gc_total += gh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:H] = gc_total * g * i * (1.0 - i)
        dz[H:2 * H] = gc_total * cd * f * (1.0 - f)
        dz[2 * H:3 * H] = gc_total * i * (1.0 - g * g)
        if gh is not None:
            dz[3 * H:] = gh * tc * o * (1.0 - o)
        else:
            dz[3 * H:] = 0.0
        _acc(W, np.outer(dz, xh))
        _acc(b, dz)
        dxh = Wd.T @ dz
        _acc(x, dxh[: xd.shape[0]])
        _acc(h, dxh[xd.shape[0]:])
        _acc(c, gc_total * f)

    _record(h_out, back)
    # second output shares the recorded closure; grads flow through either
    c_out._backward = h_out._backward
    c_out._tape = h_out._tape
    return h_out, c_out


def softmax(x):
    """Max-subtracted softmax; output sums to 1 for any finite input."""
    xd = x.data
    e = np.exp(xd - xd.max())
    p = e / e.sum()
    out = Tensor(p)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, p * (g - np.dot(p, g)))

    _record(out, back)
    return out


def log_softmax(x):
    xd = x.data
    shifted = xd - xd.max()
    lse = np.log(np.exp(shifted).sum())
    lp = shifted - lse
    out = Tensor(lp)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g - np.exp(lp) * g.sum())

    _record(out, back)
    return out


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g * (1.0 - y * y))

    _record(out, back)
    return out


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g * y * (1.0 - y))

    _record(out, back)
    return out


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g)
        _acc(b, g)

    _record(out, back)
    return out


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g)
        _acc(b, -g)

    _record(out, back)
    return out


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g * bd)
        _acc(b, g * ad)

    _record(out, back)
    return out


def scale(x, k):
    """Multiply by a python constant (no gradient w.r.t. k)."""
    k = float(k)
    out = Tensor(x.data * k)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g * k)

    _record(out, back)
    return out


def concat(parts):
    datas = [p.data for p in parts]
    out = Tensor(np.concatenate(datas))
    sizes = [d.shape[0] for d in datas]

    def back():
        g = out.grad
        if g is None:
            return
        off = 0
        for p, n in zip(parts, sizes):
            _acc(p, g[off:off + n])
            off += n

    _record(out, back)
    return out


def stack_rows(rows):
    """Stack 1-D tensors of equal length into a matrix [n, d]."""
    out = Tensor(np.stack([r.data for r in rows]))

    def back():
        g = out.grad
        if g is None:
            return
        for j, r in enumerate(rows):
            _acc(r, g[j])

    _record(out, back)
    return out


def matvec(M, v):
    """M @ v for a stacked (non-parameter) matrix M."""
    Md, vd = M.data, v.data
    if Md.ndim != 2 or Md.shape[1] != vd.shape[0]:
        raise ValueError(f"matvec: shape mismatch M{Md.shape} v{vd.shape}")
    out = Tensor(Md @ vd)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(M, np.outer(g, vd))
        _acc(v, Md.T @ g)

    _record(out, back)
    return out


def tmatvec(M, v):
    """M.T @ v, i.e. a v-weighted sum of the rows of M."""
    Md, vd = M.data, v.data
    if Md.ndim != 2 or Md.shape[0] != vd.shape[0]:
        raise ValueError(f"tmatvec: shape mismatch M{Md.shape} v{vd.shape}")
    out = Tensor(Md.T @ vd)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(M, np.outer(vd, g))
        _acc(v, Md @ g)

    _record(out, back)
    return out


def pick(x, i):
    """Select component i as a 0-d scalar."""
    i = int(i)
    out = Tensor(x.data[i])

    def back():
        g = out.grad
        if g is None:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    _record(out, back)
    return out


def total(x):
    """Sum of all components, as a 0-d scalar."""
    out = Tensor(x.data.sum())

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, np.full_like(x.data, float(g)))

    _record(out, back)
    return out


def smooth_l1(pred, target):
    """Mean Huber loss with threshold 1: 0.5 d^2 inside, |d| - 0.5 outside."""
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"smooth_l1: shape mismatch pred{pred.data.shape} vs target{target.data.shape}"
        )
    d = pred.data - target.data
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    n = d.size
    out = Tensor(per.sum() / n)

    def back():
        g = out.grad
        if g is None:
            return
        dd = np.clip(d, -1.0, 1.0) * (float(g) / n)
        _acc(pred, dd)
        _acc(target, -dd)

    _record(out, back)
    return out


def backward(loss, tape, params=None):
    """Backprop from a recorded scalar loss through the tape.

    Replays recorded ops in exact reverse order, consuming the tape.
    Returns {name: gradient array} for the given parameter tensors
    (zeros for parameters the loss never touched).
    """
    if loss._backward is None:
        raise ValueError("backward: loss is not the output of a recorded operation")
    if loss._tape is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for back in reversed(tape._ops):
        back()
    tape._ops.clear()
    if params is None:
        return None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named parameter slots with Adam state, shared across workers.

    Reads may be concurrent; updates are serialized through one lock.
    apply_gradients mutates slots in place (readers may observe values
    from adjacent versions mid-episode, which is the accepted A3C
    asynchrony); replace() swaps the whole slot map atomically so
    readers never see a mix of two versions.
    """

    def __init__(self):
        self._slots = {}
        self._m = {}
        self._v = {}
        self.version = 0
        self._lock = threading.Lock()

    def add(self, name, value):
        if name in self._slots:
            raise ValueError(f"slot {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self._slots[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self):
        return sorted(self._slots)

    def get(self, name):
        return self._slots[name]

    def snapshot(self):
        """Worker-local Tensor wrappers over the live arrays (no copy)."""
        slots = self._slots  # grab the map once; replace() swaps it whole
        return {name: Tensor(arr, name=name) for name, arr in slots.items()}

    def clone(self):
        """Deep copy with fresh Adam moments (for worker-local training)."""
        out = ParamStore()
        for name, arr in self._slots.items():
            out.add(name, arr.copy())
        return out

    def export(self):
        slots = self._slots
        return {name: arr.copy() for name, arr in slots.items()}

    def replace(self, arrays):
        """Atomically swap in a full new set of values for existing slots."""
        if set(arrays) != set(self._slots):
            raise ValueError("replace: slot names do not match the store layout")
        for name, arr in arrays.items():
            if arr.shape != self._slots[name].shape:
                raise ValueError(
                    f"replace: slot {name!r} shape {arr.shape} != {self._slots[name].shape}"
                )
        with self._lock:
            self._slots = {name: np.array(arr, dtype=np.float64) for name, arr in arrays.items()}
            self.version += 1

    def apply_gradients(self, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        """One Adam step over the named gradients; returns True if applied.

        A non-finite gradient skips the whole step (version unchanged)
        and logs the incident.
        """
        for name, g in grads.items():
            if name not in self._slots:
                raise ValueError(f"apply_gradients: unknown slot {name!r}")
            if g.shape != self._slots[name].shape:
                raise ValueError(
                    f"apply_gradients: slot {name!r} grad shape {g.shape} "
                    f"!= {self._slots[name].shape}"
                )
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.warning("non-finite gradient for slot %r; step skipped", name)
                return False
        with self._lock:
            t = self.version + 1
            bc1 = 1.0 - beta1 ** t
            bc2 = 1.0 - beta2 ** t
            for name, g in grads.items():
                m = self._m[name]
                v = self._v[name]
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * (g * g)
                self._slots[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
            self.version += 1
        return True


def apply_gradients(store, grads, lr):
    return store.apply_gradients(grads, lr)


# ---------------------------------------------------------------------------
# checkpoint io


def _write_slot(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def save_checkpoint(path, store):
    """Binary dump of a ParamStore: values, Adam moments, version counter."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        names = store.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_slot(fh, name, store._slots[name])
        for name in names:
            _write_slot(fh, name, store._m[name])
        for name in names:
            _write_slot(fh, name, store._v[name])
        fh.write(struct.pack("<Q", store.version))


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n, what):
        buf = self.fh.read(n)
        if len(buf) != n:
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes for {what} "
                f"at byte {self.offset}, got {len(buf)}"
            )
        self.offset += n
        return buf


def _read_slot(r):
    (nlen,) = struct.unpack("<I", r.read(4, "name length"))
    name = r.read(nlen, "name").decode("utf-8")
    (rank,) = struct.unpack("<I", r.read(4, f"rank of {name!r}"))
    dims = struct.unpack(f"<{rank}I", r.read(4 * rank, f"dims of {name!r}"))
    count = 1
    for d in dims:
        count *= d
    raw = r.read(8 * count, f"values of {name!r}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return name, arr


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r.read(len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (n,) = struct.unpack("<I", r.read(4, "slot count"))
        store = ParamStore()
        for _ in range(n):
            name, arr = _read_slot(r)
            store.add(name, arr)
        for _ in range(n):
            name, arr = _read_slot(r)
            store._m[name] = arr
        for _ in range(n):
            name, arr = _read_slot(r)
            store._v[name] = arr
        (version,) = struct.unpack("<Q", r.read(8, "version"))
        store.version = version
        extra = fh.read(1)
        if extra:
            raise CheckpointError(f"trailing bytes after checkpoint at byte {r.offset}")
    return store
