"""Small dense networks with hand-written backprop, in double precision.

Policy training here needs three properties more than raw speed: exact
analytic gradients (verified against finite differences), bit-level run
reproducibility, and checkpoints that reload identically on any platform.
A compact numpy implementation gives all three without a framework
dependency.

Networks are two tanh hidden layers of 64 units with a linear output,
orthogonally initialized.  `Adam` implements the bias-corrected update.
The categorical helpers operate on batched logits with the usual
max-subtraction stabilization.
"""

import json
import struct

import numpy as np

MAGIC = b"EMVCKPT1"
CHECKPOINT_VERSION = 1


def orthogonal(rng, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    """Orthogonal weight draw, sign-fixed so the result is rng-deterministic."""
    big, small = max(fan_in, fan_out), min(fan_in, fan_out)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


class MLP:
    """Fully connected net: tanh hidden layers, linear output."""

    def __init__(self, sizes, rng=None, out_gain: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.out_gain = float(out_gain)
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.params: list[np.ndarray] = []
        if rng is not None:
            n_layers = len(self.sizes) - 1
            for i in range(n_layers):
                gain = out_gain if i == n_layers - 1 else np.sqrt(2.0)
                w = orthogonal(rng, self.sizes[i], self.sizes[i + 1], gain)
                self.params.append(np.ascontiguousarray(w, dtype=np.float64))
                self.params.append(np.zeros(self.sizes[i + 1]))

    @classmethod
    def from_params(cls, sizes, params, out_gain: float = 1.0) -> "MLP":
        net = cls(sizes, rng=None, out_gain=out_gain)
        expect = 2 * (len(net.sizes) - 1)
        if len(params) != expect:
            raise ValueError(f"expected {expect} parameter arrays, got {len(params)}")
        net.params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]
        return net

    def forward(self, x):
        """Returns (output, cache); cache feeds backward()."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        acts = [h]
        n_layers = len(self.sizes) - 1
        for i in range(n_layers - 1):
            h = np.tanh(h @ self.params[2 * i] + self.params[2 * i + 1])
            acts.append(h)
        out = h @ self.params[-2] + self.params[-1]
        return out, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. every parameter.

        `cache` is the activation list from forward(); returns a list
        aligned with self.params.
        """
        grads = [None] * len(self.params)
        delta = np.asarray(dout, dtype=np.float64)
        n_layers = len(self.sizes) - 1
        for i in range(n_layers - 1, -1, -1):
            h_in = cache[i]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[2 * i].T) * (1.0 - h_in * h_in)
        return grads


class Adam:
    """Bias-corrected Adam over a list of parameter arrays (updated in place).

    Moments live in one flat buffer so a step costs a handful of vector ops
    regardless of how many parameter arrays the net has.
    """

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._shapes = [p.shape for p in params]
        bounds = np.cumsum([0] + [p.size for p in params])
        self._bounds = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
        n = int(bounds[-1])
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._g = np.empty(n)

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g = self._g
        for grad, (lo, hi) in zip(grads, self._bounds):
            g[lo:hi] = np.asarray(grad).ravel()
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * g * g
        m_hat = self.m / (1.0 - b1 ** self.t)
        v_hat = self.v / (1.0 - b2 ** self.t)
        upd = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        for p, shape, (lo, hi) in zip(self.params, self._shapes, self._bounds):
            p -= upd[lo:hi].reshape(shape)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def categorical_sample(rng, logits):
    """One action index per row, via inverse-CDF on the softmax."""
    p = softmax(logits)
    u = rng.random(p.shape[:-1])
    return (p.cumsum(axis=-1) > u[..., None]).argmax(axis=-1)


def categorical_entropy(logits):
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def save_checkpoint(path, nets: dict):
    """Write named MLPs to one self-describing binary file.

    Layout: magic, little-endian uint64 header length, JSON header
    (versions, sizes, gains, array shapes in order), then the raw
    float64 little-endian C-order bytes of every parameter array.
    """
    names = sorted(nets)
    arrays = []
    header_nets = {}
    for name in names:
        net = nets[name]
        header_nets[name] = {"sizes": list(net.sizes),
                             "hidden": "tanh", "output": "linear",
                             "out_gain": net.out_gain}
        for p in net.params:
            arrays.append((name, [int(d) for d in p.shape]))
    header = {"version": CHECKPOINT_VERSION, "dtype": "<f8", "order": "C",
              "nets": header_nets, "arrays": arrays}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            for p in nets[name].params:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        payload = fh.read()
    nets = {}
    offset = 0
    per_net: dict[str, list] = {name: [] for name in header["nets"]}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        per_net[name].append(arr.reshape(shape).copy())
        offset += count * 8
    for name, meta in header["nets"].items():
        nets[name] = MLP.from_params(meta["sizes"], per_net[name],
                                     out_gain=meta["out_gain"])
    return nets
