"""Desk-scale open-vocabulary segmentation network.

Dataflow: a small conv backbone (three overlapping 4x4 stride-2 stages),
two-way vision/language fusion with gated residual cross-attention, a query
decoder (self-attention, query->visual cross-attention, FFN), one extra
query->language attention stage feeding the attribute head, and heads for
masks, boxes, and per-label logits. The 15 label logits are averaged into 36
attribute-combination logits by `combine_scores`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .geometry import BBox, BitMask, RleMask, rle_encode
from .labels import Combo, ComboTable, LabelSpace, build_combo_table
from .tensor import Tensor


class VocabularyError(KeyError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 64
    backbone_stages: int = 3
    fusion_layers: int = 2
    decoder_layers: int = 3
    num_queries: int = 20
    num_heads: int = 4
    ffn_dim: int = 128
    use_prompt: bool = True
    num_labels: int = 15

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_labels != 15:
            raise ValueError("label count is fixed by the label space")

    @property
    def stride(self) -> int:
        return 2 ** self.backbone_stages

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "ModelConfig":
        return cls(**json.loads(payload))


@dataclass
class QueryOutputs:
    mask_logits: Tensor   # (num_queries, Hf, Wf)
    boxes: Tensor         # (num_queries, 4) cx, cy, w, h in (0, 1)
    label_logits: Tensor  # (num_queries, 15)
    combo_logits: Tensor  # (num_queries, 36)
    grid: Tuple[int, int]


@dataclass
class InstancePrediction:
    combo_id: int
    score: float
    box: BBox
    mask: RleMask
    category_id: int
    state: Optional[int]
    position: int


# ---------------------------------------------------------------------------
# tokenization and parameters


def build_vocab(space: LabelSpace) -> List[str]:
    # sorted so the vocabulary does not depend on label ordering
    return sorted({w for name in space.label_names() for w in name.split()})


def init_params(cfg: ModelConfig, seed: int,
                space: Optional[LabelSpace] = None) -> Dict[str, Tensor]:
    """Deterministic parameter table; iteration order is creation order."""
    space = space or LabelSpace()
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params: Dict[str, Tensor] = {}

    def p(name, shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[0])
        params[name] = Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    vocab = build_vocab(space)
    p("token_embed", (len(vocab), d), std=1.0)
    c_in = 1
    for i in range(cfg.backbone_stages):
        p(f"backbone.{i}.w", (16 * c_in + 1, d))
        c_in = d
    for i in range(cfg.fusion_layers):
        for branch in ("v2l", "l2v"):
            for w in ("wq", "wk", "wv", "wo"):
                p(f"fusion.{i}.{branch}.{w}", (d, d))
            params[f"fusion.{i}.{branch}.gate"] = Tensor(np.zeros(1), requires_grad=True)
    p("query_embed", (cfg.num_queries, d), std=1.0)
    for i in range(cfg.decoder_layers):
        for blk in ("self", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                p(f"decoder.{i}.{blk}.{w}", (d, d))
        p(f"decoder.{i}.ffn.w1", (d, cfg.ffn_dim))
        p(f"decoder.{i}.ffn.w2", (cfg.ffn_dim, d))
    for w in ("wq", "wk", "wv", "wo"):
        p(f"lang_cross.{w}", (d, d))
    p("head.mask.q", (d, d))
    p("head.mask.pix", (d, d))
    # queries start at a grid of anchor boxes (stored as logits) and the box
    # head predicts offsets from them; geometric diversity at init keeps the
    # Hungarian assignment stable instead of oscillating between queries
    p("head.box.w", (d + 1, 4), std=0.01)
    params["query_anchor"] = Tensor(_anchor_logits(cfg.num_queries),
                                    requires_grad=True)
    p("head.label.w", (d, d))
    # start the shared label bias negative so the 35-of-36 negative combo
    # entries begin near their target and the positives drive learning
    params["head.label.bias"] = Tensor(np.full(1, -2.0), requires_grad=True)
    return params


def _locality_bias(num_queries: int, hf: int, wf: int, heads: int,
                   sigma: float = 0.2) -> Tensor:
    """Fixed Gaussian cross-attention prior, (heads, nq, hf*wf): each query
    prefers visual tokens near its anchor centre, which differentiates the
    queries spatially from the very first step."""
    anchors = 1.0 / (1.0 + np.exp(-_anchor_logits(num_queries)))  # (nq, 4)
    ty, tx = np.meshgrid((np.arange(hf) + 0.5) / hf,
                         (np.arange(wf) + 0.5) / wf, indexing="ij")
    dx = tx.reshape(1, -1) - anchors[:, 0:1]
    dy = ty.reshape(1, -1) - anchors[:, 1:2]
    bias = -(dx * dx + dy * dy) / (2.0 * sigma * sigma)
    return Tensor(np.repeat(bias[None, :, :], heads, axis=0))


def _anchor_logits(num_queries: int) -> np.ndarray:
    """(nq, 4) inverse-sigmoid cxcywh anchors on a near-square grid."""
    cols = int(math.ceil(math.sqrt(num_queries)))
    rows = int(math.ceil(num_queries / cols))
    boxes = []
    for k in range(num_queries):
        r, c = divmod(k, cols)
        boxes.append([(c + 0.5) / cols, (r + 0.5) / rows, 0.35, 0.35])
    b = np.clip(np.asarray(boxes), 1e-4, 1 - 1e-4)
    return np.log(b / (1.0 - b))


def embed_prompt(space: LabelSpace, params: Dict[str, Tensor]) -> Tensor:
    """One embedding row per atomic label: mean of its word-token embeddings,
    then layer-normalized. Multi-word names average their tokens."""
    vocab = build_vocab(space)
    index = {w: i for i, w in enumerate(vocab)}
    table = params["token_embed"]
    rows = []
    for name in space.label_names():
        words = name.split()
        for w in words:
            if w not in index:
                raise VocabularyError(f"unknown token '{w}' in label '{name}'")
        toks = [T.slice_axis(table, 0, index[w], index[w] + 1) for w in words]
        summed = toks[0]
        for t in toks[1:]:
            summed = T.add(summed, t)
        rows.append(T.scale(summed, 1.0 / len(words)))
    stacked = T.concat(rows, axis=0)
    return T.layernorm_lastaxis(stacked)


# ---------------------------------------------------------------------------
# building blocks


def _positional_encoding(hf: int, wf: int, d: int) -> Tensor:
    """Fixed 2-D sinusoidal encoding, (hf*wf, d)."""
    half = d // 2
    pos = np.zeros((hf, wf, d))
    freqs = np.exp(-math.log(200.0) * np.arange(half // 2) / max(1, half // 2))
    ys = np.arange(hf)[:, None] * freqs[None, :]
    xs = np.arange(wf)[:, None] * freqs[None, :]
    pos[:, :, 0:half // 2] = np.sin(ys)[:, None, :]
    pos[:, :, half // 2:half] = np.cos(ys)[:, None, :]
    pos[:, :, half:half + half // 2] = np.sin(xs)[None, :, :]
    pos[:, :, half + half // 2:half + 2 * (half // 2)] = np.cos(xs)[None, :, :]
    return Tensor(pos.reshape(hf * wf, d))


def _attention(q_in: Tensor, kv_in: Tensor, params: Dict[str, Tensor],
               prefix: str, heads: int, v_in: Optional[Tensor] = None,
               score_bias: Optional[Tensor] = None) -> Tensor:
    """Multi-head attention; `v_in` lets the value stream differ from the key
    stream, `score_bias` (heads, nq, nk) adds a fixed prior to the logits."""
    d = q_in.shape[-1]
    dh = d // heads
    nq, nk = q_in.shape[0], kv_in.shape[0]
    v_in = kv_in if v_in is None else v_in

    def split(t, n):
        return T.transpose(T.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(T.matmul(q_in, params[f"{prefix}.wq"]), nq)
    k = split(T.matmul(kv_in, params[f"{prefix}.wk"]), nk)
    v = split(T.matmul(v_in, params[f"{prefix}.wv"]), nk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if score_bias is not None:
        scores = T.add(scores, score_bias)
    attn = T.softmax_lastaxis(scores)
    mixed = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (nq, d))
    return T.matmul(mixed, params[f"{prefix}.wo"])


def _backbone(image: Tensor, params: Dict[str, Tensor], cfg: ModelConfig) -> Tuple[Tensor, Tuple[int, int]]:
    h, w = image.shape
    stride = cfg.stride
    if h % stride or w % stride:
        raise T.ShapeError(f"image {h}x{w} not divisible by stride {stride}")
    x = T.reshape(image, (h, w, 1))
    c = 1
    for i in range(cfg.backbone_stages):
        # 4x4 stride-2 conv, realized as space-to-depth followed by a 2x2
        # stride-1 conv so every output cell overlaps its neighbours
        hh, ww = x.shape[0] // 2, x.shape[1] // 2
        x = T.reshape(x, (hh, 2, ww, 2, c))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (hh, ww, 4 * c))
        x = T.concat([x, Tensor(np.zeros((1, ww, 4 * c)))], axis=0)
        x = T.concat([x, Tensor(np.zeros((hh + 1, 1, 4 * c)))], axis=1)
        taps = [T.slice_axis(T.slice_axis(x, 0, dy, dy + hh), 1, dx, dx + ww)
                for dy in (0, 1) for dx in (0, 1)]
        x = T.reshape(T.concat(taps, axis=2), (hh * ww, 16 * c))
        # the trailing ones column realizes a conv bias; without one,
        # uniform-intensity patches map to features exactly proportional to
        # the intensity, which the layernorm below would erase
        x = T.concat([x, Tensor(np.ones((hh * ww, 1)))], axis=1)
        x = T.matmul(x, params[f"backbone.{i}.w"])
        if i < cfg.backbone_stages - 1:
            x = T.relu(x)
        c = cfg.embed_dim
        x = T.reshape(x, (hh, ww, c))
        h, w = hh, ww
    tokens = T.reshape(x, (h * w, cfg.embed_dim))
    tokens = T.layernorm_lastaxis(tokens)
    tokens = T.add(tokens, _positional_encoding(h, w, cfg.embed_dim))
    return tokens, (h, w)


def encode(image: Tensor, prompt: Tensor, params: Dict[str, Tensor],
           cfg: ModelConfig) -> Tuple[Tensor, Tensor, Tuple[int, int]]:
    """Backbone + two-way fusion. With all gate scalars at zero the visual
    output equals the raw backbone output bit-exactly."""
    vis, grid = _backbone(image, params, cfg)
    lang = prompt
    if cfg.use_prompt:
        for i in range(cfg.fusion_layers):
            l_att = _attention(lang, vis, params, f"fusion.{i}.v2l", cfg.num_heads)
            lang = T.add(lang, T.scale(l_att, params[f"fusion.{i}.v2l.gate"]))
            v_att = _attention(vis, lang, params, f"fusion.{i}.l2v", cfg.num_heads)
            vis = T.add(vis, T.scale(v_att, params[f"fusion.{i}.l2v.gate"]))
    return vis, lang, grid


def combo_matrix(table: ComboTable, space: LabelSpace) -> np.ndarray:
    """(36, 15) averaging matrix: row c holds 1/k on combo c's k member labels."""
    m = np.zeros((len(table), space.num_labels))
    for combo in table.combos:
        members = table.member_label_indices(combo.combo_id, space)
        m[combo.combo_id, members] = 1.0 / len(members)
    return m


def combine_scores(label_logits: Tensor, table: ComboTable,
                   space: Optional[LabelSpace] = None) -> Tensor:
    """Average each combo's member label logits; (..., 15) -> (..., 36)."""
    space = space or LabelSpace()
    m = Tensor(combo_matrix(table, space).T)
    return T.matmul(label_logits, m)


def decode(vis: Tensor, lang: Tensor, grid: Tuple[int, int],
           params: Dict[str, Tensor], cfg: ModelConfig,
           table: Optional[ComboTable] = None,
           space: Optional[LabelSpace] = None) -> QueryOutputs:
    space = space or LabelSpace()
    table = table or build_combo_table(space)
    hf, wf = grid
    nq = cfg.num_queries
    # DETR-style split: `query_embed` is a positional embedding re-injected
    # into the attention queries/keys at every layer while the residual
    # stream `q` carries content only — without this the queries collapse
    # to near-identical features after a few layers
    qp = params["query_embed"]
    q = Tensor(np.zeros((nq, cfg.embed_dim)))
    loc = _locality_bias(nq, hf, wf, cfg.num_heads)
    for i in range(cfg.decoder_layers):
        xq = T.add(q, qp)
        q = T.layernorm_lastaxis(T.add(q, _attention(
            xq, xq, params, f"decoder.{i}.self", cfg.num_heads, v_in=q)))
        q = T.layernorm_lastaxis(T.add(q, _attention(
            T.add(q, qp), vis, params, f"decoder.{i}.cross", cfg.num_heads,
            score_bias=loc)))
        ffn = T.matmul(T.relu(T.matmul(q, params[f"decoder.{i}.ffn.w1"])),
                       params[f"decoder.{i}.ffn.w2"])
        q = T.layernorm_lastaxis(T.add(q, ffn))
    if cfg.use_prompt:
        qa = T.layernorm_lastaxis(T.add(q, _attention(
            T.add(q, qp), lang, params, "lang_cross", cfg.num_heads)))
    else:
        qa = q

    mask_embed = T.matmul(q, params["head.mask.q"])
    pix_embed = T.matmul(vis, params["head.mask.pix"])
    mask_logits = T.reshape(T.scale(T.matmul(mask_embed, T.transpose(pix_embed, (1, 0))),
                                    1.0 / math.sqrt(cfg.embed_dim)),
                            (nq, hf, wf))
    ones = Tensor(np.ones((nq, 1)))
    boxes = T.sigmoid(T.add(T.matmul(T.concat([q, ones], axis=1), params["head.box.w"]),
                            params["query_anchor"]))
    label_logits = T.scale(T.matmul(T.matmul(qa, params["head.label.w"]),
                                    T.transpose(lang, (1, 0))),
                           1.0 / math.sqrt(cfg.embed_dim))
    bias = T.scale(Tensor(np.ones((nq, cfg.num_labels))), params["head.label.bias"])
    label_logits = T.add(label_logits, bias)
    combo_logits = combine_scores(label_logits, table, space)
    return QueryOutputs(mask_logits, boxes, label_logits, combo_logits, grid)


def forward(image, params: Dict[str, Tensor], cfg: ModelConfig,
            table: Optional[ComboTable] = None,
            space: Optional[LabelSpace] = None) -> QueryOutputs:
    space = space or LabelSpace()
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    prompt = embed_prompt(space, params)
    vis, lang, grid = encode(img, prompt, params, cfg)
    return decode(vis, lang, grid, params, cfg, table=table, space=space)


# ---------------------------------------------------------------------------
# inference


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def infer(image, params: Dict[str, Tensor], cfg: ModelConfig,
          score_threshold: float = 0.5, max_detections: int = 100,
          table: Optional[ComboTable] = None) -> List[InstancePrediction]:
    """Per query: argmax combo and its sigmoid score; threshold, rank by
    (score desc, query asc), binarize masks at logit 0 and upsample by
    nearest neighbour to image resolution."""
    space = LabelSpace()
    table = table or build_combo_table(space)
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    out = forward(img, params, cfg, table=table, space=space)
    combo_logits = out.combo_logits.data
    boxes = out.boxes.data
    mask_logits = out.mask_logits.data
    stride_h = h // out.grid[0]
    stride_w = w // out.grid[1]

    ranked = []
    for qi in range(cfg.num_queries):
        cid = int(np.argmax(combo_logits[qi]))
        score = float(_sigmoid(combo_logits[qi, cid]))
        if score >= score_threshold:
            ranked.append((-score, qi, cid))
    ranked.sort()
    preds: List[InstancePrediction] = []
    for neg_score, qi, cid in ranked[:max_detections]:
        cx, cy, bw, bh = boxes[qi]
        x1 = np.clip((cx - bw / 2.0) * w, 0, w)
        x2 = np.clip((cx + bw / 2.0) * w, 0, w)
        y1 = np.clip((cy - bh / 2.0) * h, 0, h)
        y2 = np.clip((cy + bh / 2.0) * h, 0, h)
        bits = (mask_logits[qi] > 0).astype(np.uint8)
        up = np.kron(bits, np.ones((stride_h, stride_w), dtype=np.uint8))
        combo = table.by_id(cid)
        preds.append(InstancePrediction(
            combo_id=cid, score=-neg_score,
            box=BBox(float(x1), float(y1), float(x2), float(y2)),
            mask=rle_encode(BitMask(h, w, up)),
            category_id=combo.category_id, state=combo.state,
            position=combo.position))
    return preds


# ---------------------------------------------------------------------------
# checkpoint file: magic "GSA2", version, config json, parameter table,
# optional training-state section (momentum buffers, step, RNG state)

CHECKPOINT_MAGIC = b"GSA2"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_table(f, table: Dict[str, Tensor]) -> None:
    f.write(struct.pack("<I", len(table)))
    for name, t in table.items():
        enc = name.encode("utf-8")
        f.write(struct.pack("<H", len(enc)))
        f.write(enc)
        f.write(struct.pack("<B", t.data.ndim))
        for dim in t.data.shape:
            f.write(struct.pack("<I", dim))
        f.write(t.data.astype("<f8").tobytes())


def _read_table(f, requires_grad: bool) -> Dict[str, Tensor]:
    (count,) = struct.unpack("<I", f.read(4))
    out: Dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
        out[name] = Tensor(data.copy(), requires_grad=requires_grad)
    return out


def save_checkpoint(path, cfg: ModelConfig, params: Dict[str, Tensor],
                    train_state: Optional[dict] = None) -> None:
    """`train_state` keys: momentum (name->Tensor), step (int), rng (dict)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg_json = cfg.to_json().encode("utf-8")
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        _write_table(f, params)
        if train_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            meta = json.dumps({"step": train_state["step"],
                               "rng": train_state["rng"]}).encode("utf-8")
            f.write(struct.pack("<I", len(meta)))
            f.write(meta)
            _write_table(f, train_state["momentum"])


def load_checkpoint(path) -> Tuple[ModelConfig, Dict[str, Tensor], Optional[dict]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        (clen,) = struct.unpack("<I", f.read(4))
        cfg = ModelConfig.from_json(f.read(clen).decode("utf-8"))
        params = _read_table(f, requires_grad=True)
        (has_train,) = struct.unpack("<B", f.read(1))
        train_state = None
        if has_train:
            (mlen,) = struct.unpack("<I", f.read(4))
            meta = json.loads(f.read(mlen).decode("utf-8"))
            momentum = _read_table(f, requires_grad=False)
            train_state = {"step": meta["step"], "rng": meta["rng"],
                           "momentum": momentum}
    return cfg, params, train_state


# ---------------------------------------------------------------------------
# prediction file


def write_predictions(path, preds_by_image: Dict[int, List[InstancePrediction]]) -> None:
    records = []
    for image_id in sorted(preds_by_image):
        insts = []
        for p in preds_by_image[image_id]:
            rec = {
                "combo_id": p.combo_id,
                "category_id": p.category_id,
                "position": p.position,
                "score": p.score,
                "bbox": p.box.to_xywh(),
                "rle": {"h": p.mask.height, "w": p.mask.width,
                        "counts": list(p.mask.counts)},
            }
            if p.state is not None:
                rec["state"] = p.state
            insts.append(rec)
        records.append({"image_id": image_id, "instances": insts})
    Path(path).write_text(json.dumps(records, indent=1, sort_keys=True),
                          encoding="utf-8")


def read_predictions(path) -> Dict[int, List[InstancePrediction]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out: Dict[int, List[InstancePrediction]] = {}
    for rec in doc:
        insts = []
        for p in rec["instances"]:
            insts.append(InstancePrediction(
                combo_id=int(p["combo_id"]), score=float(p["score"]),
                box=BBox.from_xywh(p["bbox"]),
                mask=RleMask(int(p["rle"]["h"]), int(p["rle"]["w"]),
                             [int(c) for c in p["rle"]["counts"]]),
                category_id=int(p["category_id"]),
                state=int(p["state"]) if "state" in p else None,
                position=int(p["position"])))
        out[int(rec["image_id"])] = insts
    return out
