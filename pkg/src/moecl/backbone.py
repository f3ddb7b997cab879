"""Frozen two-tower backbone stub.

A tiny pre-LN transformer image tower over token grids, and a text tower
that maps per-class descriptor vectors (the stand-in for class names)
through a small MLP. Predictions compare L2-normalized embeddings by
cosine similarity. After pretraining both towers are frozen for the
lifetime of a run; adapters only ever contribute additive deltas through
per-block sockets.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import DataError, ShapeError
from .optim import AdamW
from .tensor import (
    Tensor,
    broadcast_to,
    concat_rows,
    cross_entropy_smoothed,
    gelu,
    layer_norm,
    matmul,
    normalize_rows,
    reshape,
    softmax,
    take_row,
    transpose,
)

LOGIT_SCALE = 20.0


@dataclass
class Geometry:
    depth: int = 2
    width: int = 32
    heads: int = 4
    patches: int = 16
    mlp_ratio: int = 4

    @property
    def tokens(self):
        return self.patches + 1

    @property
    def head_dim(self):
        return self.width // self.heads


class Backbone:
    def __init__(self, geometry=None, seed=0):
        self.geometry = geometry or Geometry()
        g = self.geometry
        if g.width % g.heads:
            raise ShapeError("width must divide evenly across heads")
        rng = np.random.default_rng(seed)
        self.params = {}
        self.descriptors = {}  # class id -> descriptor vector (frozen buffer)
        self.frozen = False

        def p(name, *shape, std=0.02):
            t = Tensor(std * rng.standard_normal(shape), requires_grad=True)
            self.params[name] = t
            return t

        def ones(name, *shape):
            t = Tensor(np.ones(shape), requires_grad=True)
            self.params[name] = t
            return t

        def zeros(name, *shape):
            t = Tensor(np.zeros(shape), requires_grad=True)
            self.params[name] = t
            return t

        d, dh, mr = g.width, g.head_dim, g.mlp_ratio
        p("image.patch_embed", d, d, std=1.0 / np.sqrt(d))
        p("image.pos", g.tokens, d)
        p("image.cls", d)
        for b in range(g.depth):
            pre = f"image.block{b}"
            ones(f"{pre}.ln1.g", d)
            zeros(f"{pre}.ln1.b", d)
            for h in range(g.heads):
                p(f"{pre}.head{h}.wq", d, dh, std=1.0 / np.sqrt(d))
                p(f"{pre}.head{h}.wk", d, dh, std=1.0 / np.sqrt(d))
                p(f"{pre}.head{h}.wv", d, dh, std=1.0 / np.sqrt(d))
                p(f"{pre}.head{h}.wo", dh, d, std=1.0 / np.sqrt(d))
            ones(f"{pre}.ln2.g", d)
            zeros(f"{pre}.ln2.b", d)
            p(f"{pre}.mlp.w1", d, mr * d, std=1.0 / np.sqrt(d))
            zeros(f"{pre}.mlp.b1", mr * d)
            p(f"{pre}.mlp.w2", mr * d, d, std=1.0 / np.sqrt(mr * d))
            zeros(f"{pre}.mlp.b2", d)
        ones("image.lnf.g", d)
        zeros("image.lnf.b", d)
        p("text.w1", d, d, std=1.0 / np.sqrt(d))
        zeros("text.b1", d)
        p("text.w2", d, d, std=1.0 / np.sqrt(d))
        zeros("text.b2", d)

    # -- bookkeeping ------------------------------------------------------

    def register_classes(self, class_ids, descriptors):
        for cid, desc in zip(class_ids, np.asarray(descriptors, dtype=np.float64)):
            self.descriptors[int(cid)] = desc.copy()

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.zero_grad()
        self.frozen = True

    def parameter_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward paths ------------------------------------------------------

    def _mhsa(self, x, block):
        g = self.geometry
        out = None
        scale = 1.0 / np.sqrt(g.head_dim)
        for h in range(g.heads):
            pre = f"image.block{block}.head{h}"
            q = matmul(x, self.params[f"{pre}.wq"])
            k = matmul(x, self.params[f"{pre}.wk"])
            v = matmul(x, self.params[f"{pre}.wv"])
            scores = matmul(q, transpose(k)) * scale
            probs = softmax(scores)
            head = matmul(matmul(probs, v), self.params[f"{pre}.wo"])
            out = head if out is None else out + head
        return out

    def encode_image(self, patch_grids, sockets=None, task=None, training=False):
        """Embed a batch of token grids; returns a [B, width] Tensor.

        `sockets` is an optional per-block sequence whose entries expose
        ``forward_delta(tokens, cls, task, training)``.
        """
        g = self.geometry
        x = np.asarray(patch_grids, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1] != g.patches or x.shape[2] != g.width:
            raise ShapeError(
                f"expected [B, {g.patches}, {g.width}] token grids, got {x.shape}"
            )
        bsz = x.shape[0]
        tokens = matmul(Tensor(x), self.params["image.patch_embed"])
        cls_tok = broadcast_to(
            reshape(self.params["image.cls"], (1, 1, g.width)),
            (bsz, 1, g.width),
        )
        h = concat_rows(cls_tok, tokens) + self.params["image.pos"]
        for b in range(g.depth):
            pre = f"image.block{b}"
            a = self._mhsa(
                layer_norm(h, self.params[f"{pre}.ln1.g"], self.params[f"{pre}.ln1.b"]),
                b,
            )
            sock = sockets[b] if sockets is not None else None
            if sock is not None:
                delta = sock.forward_delta(a, take_row(a, 0), task, training)
                if delta is not None:
                    a = a + delta
            h = h + a
            m = layer_norm(h, self.params[f"{pre}.ln2.g"], self.params[f"{pre}.ln2.b"])
            m = matmul(m, self.params[f"{pre}.mlp.w1"]) + self.params[f"{pre}.mlp.b1"]
            m = gelu(m)
            m = matmul(m, self.params[f"{pre}.mlp.w2"]) + self.params[f"{pre}.mlp.b2"]
            h = h + m
        h = layer_norm(h, self.params["image.lnf.g"], self.params["image.lnf.b"])
        emb = normalize_rows(take_row(h, 0))
        return reshape(emb, (g.width,)) if squeeze else emb

    def encode_text(self, class_ids, socket=None, task=None, training=False):
        """Embed class descriptors; returns a [M, width] Tensor."""
        if len(class_ids) == 0:
            raise DataError("empty class set")
        try:
            desc = np.stack([self.descriptors[int(c)] for c in class_ids])
        except KeyError as exc:
            raise DataError(f"unregistered class id {exc}") from exc
        h = matmul(Tensor(desc[:, None, :]), self.params["text.w1"]) + self.params["text.b1"]
        h = gelu(h)
        if socket is not None:
            delta = socket.forward_delta(h, take_row(h, 0), task, training)
            if delta is not None:
                h = h + delta
        h = matmul(h, self.params["text.w2"]) + self.params["text.b2"]
        return normalize_rows(take_row(h, 0))

    def classify_cosine(self, image_embedding, class_ids, text_embeddings=None):
        """Cosine-similarity classification over a candidate class set.

        Returns (similarities [..., M], predicted class ids). Candidates
        are ranked in ascending-id order so an exact tie picks the lowest.
        """
        if len(class_ids) == 0:
            raise DataError("empty class set")
        order = np.argsort(np.asarray(class_ids, dtype=np.int64), kind="stable")
        cids = np.asarray(class_ids, dtype=np.int64)[order]
        if text_embeddings is None:
            text_embeddings = self.encode_text(cids).data
        else:
            text_embeddings = np.asarray(text_embeddings)[order]
        emb = np.asarray(
            image_embedding.data if isinstance(image_embedding, Tensor)
            else image_embedding
        )
        sims = emb @ text_embeddings.T
        pred = cids[np.argmax(sims, axis=-1)]
        return sims, pred

    # -- persistence ----------------------------------------------------------

    def state_arrays(self):
        g = self.geometry
        arrays = {
            "meta.geometry": np.array(
                [g.depth, g.width, g.heads, g.patches, g.mlp_ratio], dtype=np.float64
            )
        }
        for name, t in self.params.items():
            arrays[f"param.{name}"] = t.data
        for cid in sorted(self.descriptors):
            arrays[f"descriptor.{cid}"] = self.descriptors[cid]
        return arrays

    def save(self, path):
        io.save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path):
        arrays = io.load_arrays(path)
        if "meta.geometry" not in arrays:
            raise DataError("checkpoint lacks geometry record")
        depth, width, heads, patches, mlp_ratio = (
            int(v) for v in arrays["meta.geometry"]
        )
        bb = cls(Geometry(depth, width, heads, patches, mlp_ratio), seed=0)
        for name, t in bb.params.items():
            key = f"param.{name}"
            if key not in arrays:
                raise DataError(f"checkpoint missing parameter {name}")
            if arrays[key].shape != t.data.shape:
                raise DataError(f"checkpoint shape mismatch for {name}")
            t.data = np.ascontiguousarray(arrays[key])
        for key, arr in arrays.items():
            if key.startswith("descriptor."):
                bb.descriptors[int(key.split(".", 1)[1])] = arr
        bb.freeze()
        return bb


def pretrain_backbone(reference, steps, seed=0, geometry=None, lr=1e-3,
                      batch_size=32):
    """Contrastive-cosine pretraining on pretext classes, then freeze."""
    bb = Backbone(geometry=geometry, seed=seed)
    bb.register_classes(reference.class_ids, reference.descriptors)
    bb.register_classes(reference.holdout_class_ids, reference.holdout_descriptors)
    if steps > 0:
        rng = np.random.default_rng(seed + 1)
        opt = AdamW(list(bb.params.values()), lr=lr, weight_decay=1e-4)
        class_ids = sorted(reference.class_ids)
        lookup = {c: i for i, c in enumerate(class_ids)}
        targets_all = np.array([lookup[int(y)] for y in reference.labels])
        first_loss = last_loss = None
        for _ in range(steps):
            idx = rng.integers(0, len(reference.samples), size=batch_size)
            img = bb.encode_image(reference.samples[idx])
            txt = bb.encode_text(class_ids)
            logits = matmul(img, transpose(txt)) * LOGIT_SCALE
            loss = cross_entropy_smoothed(logits, targets_all[idx], 0.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            last_loss = loss.item()
            if first_loss is None:
                first_loss = last_loss
        if last_loss >= first_loss:
            warnings.warn(
                f"pretraining did not reduce loss ({first_loss:.4f} -> "
                f"{last_loss:.4f}); freezing anyway"
            )
    bb.freeze()
    return bb


def zero_shot_accuracy(backbone, samples, labels, class_ids, chunk=64):
    """Accuracy of the pure frozen towers on a labelled sample set."""
    text = backbone.encode_text(sorted(class_ids)).data
    correct = 0
    for lo in range(0, len(samples), chunk):
        emb = backbone.encode_image(samples[lo:lo + chunk]).data
        _, pred = backbone.classify_cosine(emb, sorted(class_ids), text)
        correct += int((pred == labels[lo:lo + chunk]).sum())
    return 100.0 * correct / len(samples)
