"""Dual-tower encoder: an input tower of pre-LN residual MLP blocks and a
class tower (embedding table followed by the same kind of blocks).

All parameters live in one flat float64 vector ``model.theta``; named tensors
are reshaped views into it, and gradients use the same flat layout. That makes
masks, optimizer state, and checkpoints plain 1-d arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, DimensionError

ROLE_FC1 = "mlp_fc1"
ROLE_FC2 = "mlp_fc2"
ROLE_OTHER = "other"
ROLES = (ROLE_FC1, ROLE_FC2, ROLE_OTHER)
DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class BlockSpec:
    width: int = 32
    expansion: int = 4
    block_count: int = 2

    def __post_init__(self):
        if self.width < 2 or self.expansion < 1 or self.block_count < 1:
            raise ArgumentError(f"invalid BlockSpec {self}")

    @property
    def hidden(self):
        return self.width * self.expansion


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    role: str
    tower: str
    shape: tuple
    start: int
    stop: int
    trainable: bool = True

    @property
    def size(self):
        return self.stop - self.start

    @property
    def slice(self):
        return slice(self.start, self.stop)


class ParamRegistry:
    """Ordered, role-tagged table of named parameter ranges in the flat vector."""

    def __init__(self, entries):
        self.entries = list(entries)
        self._by_name = {e.name: e for e in self.entries}
        if len(self._by_name) != len(self.entries):
            raise ArgumentError("duplicate parameter names in registry")
        self.total = self.entries[-1].stop if self.entries else 0

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name):
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def names(self):
        return [e.name for e in self.entries]

    def indices(self, predicate):
        parts = [np.arange(e.start, e.stop) for e in self.entries if predicate(e)]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def role_indices(self, role):
        return self.indices(lambda e: e.role == role)

    def trainable_indices(self):
        return self.indices(lambda e: e.trainable)

    def entry_at(self, flat_index):
        starts = [e.start for e in self.entries]
        k = int(np.searchsorted(starts, flat_index, side="right")) - 1
        return self.entries[k]


def _layout(spec, input_dim, num_classes):
    d, h = spec.width, spec.hidden
    items = [("input.proj.weight", ROLE_OTHER, "input", (d, input_dim)),
             ("input.proj.bias", ROLE_OTHER, "input", (d,))]

    def blocks(tower):
        out = []
        for i in range(spec.block_count):
            p = f"{tower}.blocks.{i}"
            out += [(f"{p}.ln.gamma", ROLE_OTHER, tower, (d,)),
                    (f"{p}.ln.beta", ROLE_OTHER, tower, (d,)),
                    (f"{p}.fc1.weight", ROLE_FC1, tower, (h, d)),
                    (f"{p}.fc1.bias", ROLE_FC1, tower, (h,)),
                    (f"{p}.fc2.weight", ROLE_FC2, tower, (d, h)),
                    (f"{p}.fc2.bias", ROLE_FC2, tower, (d,))]
        return out

    items += blocks("input")
    items.append(("class.table", ROLE_OTHER, "class", (num_classes, d)))
    items += blocks("class")
    entries, pos = [], 0
    for name, role, tower, shape in items:
        n = int(np.prod(shape))
        entries.append(RegistryEntry(name, role, tower, shape, pos, pos + n))
        pos += n
    # frozen logit temperature; never receives a gradient
    entries.append(RegistryEntry("temperature", ROLE_OTHER, "class", (1,), pos, pos + 1,
                                 trainable=False))
    return ParamRegistry(entries)


def parameter_count(spec, input_dim, num_classes):
    """Closed-form size of the flat parameter vector."""
    d, h = spec.width, spec.hidden
    block = 2 * d + (h * d + h) + (d * h + d)
    return (d * input_dim + d) + 2 * spec.block_count * block + num_classes * d + 1


class Model:
    def __init__(self, spec, input_dim, num_classes, theta=None):
        self.spec = spec
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.registry = _layout(spec, input_dim, num_classes)
        if theta is None:
            theta = np.zeros(self.registry.total)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.registry.total,):
            raise DimensionError(
                f"theta has shape {theta.shape}, layout needs ({self.registry.total},)")
        self.theta = theta

    def __getitem__(self, name):
        e = self.registry[name]
        return self.theta[e.slice].reshape(e.shape)

    def view(self, flat, name):
        e = self.registry[name]
        return flat[e.slice].reshape(e.shape)

    @property
    def temperature(self):
        return float(self.theta[self.registry["temperature"].start])

    def copy(self):
        return Model(self.spec, self.input_dim, self.num_classes, self.theta.copy())

    def zeros_like_theta(self):
        return np.zeros_like(self.theta)

    def block_names(self, tower):
        return [f"{tower}.blocks.{i}" for i in range(self.spec.block_count)]


def build_model(spec, input_dim, num_classes, seed, temperature=DEFAULT_TEMPERATURE):
    if input_dim < 1 or num_classes < 1:
        raise ArgumentError("input_dim and num_classes must be positive")
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    model = Model(spec, input_dim, num_classes)
    rng = np.random.default_rng(seed)
    for e in model.registry:
        view = model[e.name]
        if e.name == "temperature":
            view[...] = temperature
        elif e.name.endswith("ln.gamma"):
            view[...] = 1.0
        elif e.name.endswith(("bias", "ln.beta")):
            view[...] = 0.0
        elif e.name == "class.table":
            rows = rng.standard_normal(e.shape)
            view[...] = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        else:
            fan_in = e.shape[1]
            view[...] = rng.standard_normal(e.shape) / np.sqrt(fan_in)
    return model


def named_parameters(model):
    return model.registry


# ------------------------------------------------------------------ towers

def _tower_forward(model, h, tower):
    caches = []
    for p in model.block_names(tower):
        a, c_ln = ad.layer_norm(h, model[f"{p}.ln.gamma"], model[f"{p}.ln.beta"])
        z1, c1 = ad.affine(a, model[f"{p}.fc1.weight"], model[f"{p}.fc1.bias"])
        g, cg = ad.gelu(z1)
        z2, c2 = ad.affine(g, model[f"{p}.fc2.weight"], model[f"{p}.fc2.bias"])
        h = h + z2
        caches.append((p, c_ln, c1, cg, c2))
    return h, caches


def _tower_backward(model, caches, dh, grad, absolute=False):
    """Accumulate parameter gradients into ``grad``; return d(tower input).

    With ``absolute`` the per-row absolute gradients summed over rows are
    accumulated instead (the loss must be a sum of per-row terms).
    """
    aff_bwd = ad.affine_backward_abs if absolute else ad.affine_backward
    for p, c_ln, c1, cg, c2 in reversed(caches):
        dg, dW2, db2 = aff_bwd(c2, dh)
        dz1 = ad.gelu_backward(cg, dg)
        da, dW1, db1 = aff_bwd(c1, dz1)
        dx_ln, dgamma, dbeta = ad.layer_norm_backward(c_ln, da)
        if absolute:
            xhat = c_ln[0]
            dgamma = (np.abs(da) * np.abs(xhat)).sum(axis=0)
            dbeta = np.abs(da).sum(axis=0)
        model.view(grad, f"{p}.fc2.weight")[...] += dW2
        model.view(grad, f"{p}.fc2.bias")[...] += db2
        model.view(grad, f"{p}.fc1.weight")[...] += dW1
        model.view(grad, f"{p}.fc1.bias")[...] += db1
        model.view(grad, f"{p}.ln.gamma")[...] += dgamma
        model.view(grad, f"{p}.ln.beta")[...] += dbeta
        dh = dh + dx_ln
    return dh


def input_tower_forward(model, x):
    """Pre-normalization input-tower output and the caches for backward."""
    x = ad.as_tensor2(x)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"input has {x.shape[1]} features, model expects {model.input_dim}")
    h, c_proj = ad.affine(x, model["input.proj.weight"], model["input.proj.bias"])
    h, caches = _tower_forward(model, h, "input")
    return h, (c_proj, caches)


def input_tower_backward(model, cache, dh, grad, absolute=False):
    c_proj, caches = cache
    dh = _tower_backward(model, caches, dh, grad, absolute)
    bwd = ad.affine_backward_abs if absolute else ad.affine_backward
    _, dW, db = bwd(c_proj, dh)
    model.view(grad, "input.proj.weight")[...] += dW
    model.view(grad, "input.proj.bias")[...] += db


def _check_class_ids(model, class_ids):
    class_ids = np.asarray(class_ids, dtype=np.int64).ravel()
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= model.num_classes):
        raise IndexError(f"class id out of range [0, {model.num_classes})")
    return class_ids


def class_tower_forward(model, class_ids):
    class_ids = _check_class_ids(model, class_ids)
    h = model["class.table"][class_ids]
    h, caches = _tower_forward(model, h, "class")
    return h, (class_ids, caches)


def class_tower_backward(model, cache, dh, grad, absolute=False):
    class_ids, caches = cache
    dh = _tower_backward(model, caches, dh, grad, absolute)
    if absolute:
        dh = np.abs(dh)
    np.add.at(model.view(grad, "class.table"), class_ids, dh)


def encode_input(model, x):
    h, tc = input_tower_forward(model, x)
    u, nc = ad.l2_normalize(h)
    return u, (tc, nc)


def encode_class(model, class_ids):
    """Unit embeddings for one class id or an array of ids."""
    h, tc = class_tower_forward(model, np.atleast_1d(class_ids))
    u, nc = ad.l2_normalize(h)
    return u, (tc, nc)


# ------------------------------------------------------------------ loss

def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def contrastive_loss(img_embs, cls_embs, labels, temperature):
    """Symmetric contrastive loss over a batch and its unique classes.

    ``cls_embs[c]`` is the embedding of the c-th entry of ``np.unique(labels)``.
    Rows (image -> class) use one-hot targets; columns (class -> image) use
    targets spread uniformly over the images carrying that class.
    Returns ``(loss, d_img, d_cls)``.
    """
    labels = np.asarray(labels).ravel()
    B = img_embs.shape[0]
    if B < 1:
        raise ArgumentError("contrastive_loss needs a nonempty batch")
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    C = counts.size
    if cls_embs.shape[0] != C:
        raise DimensionError(f"{cls_embs.shape[0]} class embeddings for {C} unique labels")
    logits = img_embs @ cls_embs.T / temperature
    rows = np.arange(B)

    lp_row = _log_softmax(logits, axis=1)
    row_loss = -lp_row[rows, inv].mean()
    d_row = np.exp(lp_row)
    d_row[rows, inv] -= 1.0
    d_row /= B

    lp_col = _log_softmax(logits, axis=0)
    target = np.zeros_like(logits)
    target[rows, inv] = 1.0 / counts[inv]
    col_loss = -(target * lp_col).sum() / C
    d_col = (np.exp(lp_col) - target) / C

    d_logits = 0.5 * (d_row + d_col)
    d_img = d_logits @ cls_embs / temperature
    d_cls = d_logits.T @ img_embs / temperature
    return 0.5 * (row_loss + col_loss), d_img, d_cls


def loss_and_grad(model, x, labels, grad=None):
    """Contrastive loss of a labeled batch and its gradient in flat layout.

    The gradient is added into ``grad`` when given.
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    uniq = np.unique(labels)
    img, (itc, inc) = encode_input(model, x)
    cls, (ctc, cnc) = encode_class(model, uniq)
    loss, d_img, d_cls = contrastive_loss(img, cls, labels, model.temperature)
    if grad is None:
        grad = model.zeros_like_theta()
    input_tower_backward(model, itc, ad.l2_normalize_backward(inc, d_img), grad)
    class_tower_backward(model, ctc, ad.l2_normalize_backward(cnc, d_cls), grad)
    return float(loss), grad


def batch_loss(model, x, labels):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    uniq = np.unique(labels)
    img, _ = encode_input(model, x)
    cls, _ = encode_class(model, uniq)
    return float(contrastive_loss(img, cls, labels, model.temperature)[0])


# ------------------------------------------------------------------ inference

def similarity_scores(model, x, candidates):
    candidates = np.unique(np.asarray(candidates, dtype=np.int64))
    if candidates.size == 0:
        raise ArgumentError("predict needs a nonempty candidate set")
    img, _ = encode_input(model, x)
    cls, _ = encode_class(model, candidates)
    return img @ cls.T, candidates


def predict(model, x, candidate_class_ids):
    """Argmax cosine similarity over the candidate classes, per input row.

    Candidates are sorted ascending, so ties go to the smallest class id.
    """
    scores, candidates = similarity_scores(model, x, candidate_class_ids)
    return candidates[np.argmax(scores, axis=1)]
