"""The in-context text removal / segmentation network.

Data flow for one composite grid (chained layout)::

    six panels -> patch embedding -> mask token at masked label patches
        -> + positional / panel-type / row embeddings
        -> pre-fusion blocks (each panel attends within itself)
        -> linear fusion:  O_r = I_r + O_r + a_y*Y_r,   Y_r = I_r + a_o*O_r + Y_r
        -> context aggregation: each stream += xattn(stream, other row's O|Y)
        -> post-fusion blocks over all four streams
        -> one decoder shared by the removal (O) and segmentation (Y) streams
        -> (training only) two-conv pixel head on the segmentation feature map
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .compositor import LABEL_PANELS, LAYOUTS, CompositeGrid
from .errors import ContractError, ModelError, ShapeError
from .nn import Block, Conv3x3, CrossAttention, LayerNorm, Linear, Module, param
from .rng import derive_rng
from .tensor import Tensor

FUSION_MODES = ("none", "linear_only", "caa")
MASK_TOKEN_KINDS = ("shared", "per_task")
PANEL_INDEX = {"I": 0, "O": 1, "Y": 2}


@dataclass
class ModelConfig:
    panel_h: int = 64
    panel_w: int = 64
    patch: int = 8
    dim: int = 192
    heads: int = 3
    pre_depth: int = 1
    post_depth: int = 3
    dec_depth: int = 2
    mlp_ratio: float = 4.0
    dec_channels: int = 64
    mask_token: str = "shared"
    fusion: str = "caa"
    mode: str = "chained"
    seed: int = 0

    def __post_init__(self):
        if self.panel_h % self.patch or self.panel_w % self.patch:
            raise ContractError("panel size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ContractError("embedding dim must be divisible by the head count")
        if min(self.pre_depth, self.post_depth, self.dec_depth) < 1:
            raise ContractError("all depths must be >= 1")
        if self.dec_channels < 2 or self.dec_channels % 2:
            raise ContractError("dec_channels must be an even number >= 2")
        if self.fusion not in FUSION_MODES:
            raise ContractError(f"fusion must be one of {FUSION_MODES}")
        if self.mask_token not in MASK_TOKEN_KINDS:
            raise ContractError(f"mask_token must be one of {MASK_TOKEN_KINDS}")
        if self.mode not in LAYOUTS:
            raise ContractError(f"mode must be one of {tuple(LAYOUTS)}")

    @property
    def lattice(self):
        return self.panel_h // self.patch, self.panel_w // self.patch

    @property
    def n_tokens(self):
        gh, gw = self.lattice
        return gh * gw

    @property
    def label_kinds(self):
        return LABEL_PANELS[self.mode]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# toy model and the smaller configuration used for CPU training runs
TOY_CONFIG = ModelConfig()
DESK_CONFIG = ModelConfig(panel_h=32, panel_w=32, patch=4, dim=64, heads=2,
                          pre_depth=1, post_depth=2, dec_depth=1, dec_channels=16)


class ForwardOutput:
    def __init__(self, removal, seg, seg_logits, rows):
        self.removal = removal        # Tensor [B, rows, 3, h, w] or None
        self.seg = seg                # Tensor [B, rows, 3, h, w] or None
        self.seg_logits = seg_logits  # Tensor [B, rows, 2, h, w] or None
        self.rows = rows


def patchify(panel, patch):
    """``[B, 3, h, w]`` array -> ``[B, n, patch*patch*3]`` (row-major patches, channels last)."""
    b, c, h, w = panel.shape
    gh, gw = h // patch, w // patch
    x = panel.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


class ContextModel(Module):
    def __init__(self, config=None, rng=None):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = rng if rng is not None else derive_rng(cfg.seed, "init")
        d, p, n = cfg.dim, cfg.patch, cfg.n_tokens
        c = cfg.dec_channels
        self.patch_embed = Linear(rng, p * p * 3, d)
        self.pos_embed = param(rng.normal(0.0, 0.02, size=(n, d)))
        self.panel_embed = param(rng.normal(0.0, 0.02, size=(3, d)))
        self.row_embed = param(rng.normal(0.0, 0.02, size=(2, d)))
        if cfg.mask_token == "shared":
            self.mask_token = param(rng.normal(0.0, 0.02, size=d))
        else:
            self.mask_token_O = param(rng.normal(0.0, 0.02, size=d))
            self.mask_token_Y = param(rng.normal(0.0, 0.02, size=d))
        self.pre_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.pre_depth)]
        if cfg.fusion != "none":
            self.alpha_o = param(np.zeros(()))
            self.alpha_y = param(np.zeros(()))
        if cfg.fusion == "caa":
            # own stream, so every other weight matches a linear_only model with the same seed
            self.caa = CrossAttention(derive_rng(cfg.seed, "init", "caa"), d, cfg.heads)
            # zero output projection: the branch starts as the identity on the fused streams
            self.caa.out.weight.data[...] = 0
        self.post_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.post_depth)]
        self.post_norm = LayerNorm(d)
        self.dec_blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth)]
        self.dec_norm = LayerNorm(d)
        self.dec_embed = Linear(rng, d, p * p * c)
        self.dec_conv = Conv3x3(rng, c, c)
        self.dec_pred = Linear(rng, c, 3)
        self.pix_conv1 = Conv3x3(rng, c, c // 2)
        self.pix_conv2 = Conv3x3(rng, c // 2, 2)

    # ------------------------------------------------------------ parameters
    def mask_token_for(self, kind):
        if self.config.mask_token == "shared":
            return self.mask_token
        return self.mask_token_O if kind == "O" else self.mask_token_Y

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in params.items():
            arr = np.asarray(state[k])
            if arr.shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model {v.shape}")
            v.data[...] = arr

    def num_parameters(self, training=False):
        total = 0
        for name, p in self.named_parameters():
            if not training and name.startswith("pix_"):
                continue
            total += p.size
        return total

    def check_weights(self):
        for name, p in self.named_parameters():
            if not np.isfinite(p.data).all():
                raise ModelError(f"parameter {name} contains non-finite values")

    def save(self, path, meta=None):
        return save_checkpoint(path, self.state_dict(), {"model": self.config.to_dict()}, meta)

    @classmethod
    def load(cls, path):
        tensors, header = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(header["config"]["model"]))
        model.load_state_dict(tensors)
        return model

    # ---------------------------------------------------------------- stages
    def _grid_pixels(self, grids):
        cfg = self.config
        if isinstance(grids, CompositeGrid):
            grids = [grids]
        if isinstance(grids, (list, tuple)):
            for g in grids:
                if g.layout != cfg.mode:
                    raise ContractError(f"grid layout {g.layout} != model mode {cfg.mode}")
            pixels = np.stack([g.pixels for g in grids])
        else:
            pixels = np.asarray(grids)
        ncol = len(LAYOUTS[cfg.mode])
        expect = (3, 2 * cfg.panel_h, ncol * cfg.panel_w)
        if pixels.ndim != 4 or pixels.shape[1:] != expect:
            raise ShapeError(f"grid batch {pixels.shape} does not match model grid {expect}")
        return pixels

    def embed_and_mask(self, grids, plans):
        """Token sequences ``{(kind, row): Tensor[B, n, d]}`` with masked label patches."""
        cfg = self.config
        pixels = self._grid_pixels(grids)
        if not isinstance(plans, (list, tuple)):
            plans = [plans]
        b = pixels.shape[0]
        if len(plans) != b:
            raise ContractError(f"{len(plans)} mask plans for {b} grids")
        for plan in plans:
            if tuple(plan.lattice) != cfg.lattice:
                raise ShapeError(f"mask lattice {plan.lattice} != model lattice {cfg.lattice}")
        h, w, n = cfg.panel_h, cfg.panel_w, cfg.n_tokens
        kinds = LAYOUTS[cfg.mode]
        keys = [(k, r) for r in (0, 1) for k in kinds]
        raw = np.concatenate(
            [patchify(pixels[:, :, r * h:(r + 1) * h, kinds.index(k) * w:(kinds.index(k) + 1) * w], cfg.patch)
             for k, r in keys], axis=0)
        emb = self.patch_embed(Tensor(raw))
        emb = emb.reshape(len(keys), b, n, cfg.dim)
        tokens = {}
        for i, (k, r) in enumerate(keys):
            t = emb[i]
            if k != "I":
                mask = np.stack([plan.column_mask(k)[r].reshape(-1) for plan in plans])
                if mask.any():
                    t = T.masked_replace(t, mask, self.mask_token_for(k))
            offset = T.add(T.add(self.pos_embed, self.panel_embed[PANEL_INDEX[k]]), self.row_embed[r])
            tokens[(k, r)] = T.add(t, _tile_rows(offset, b))
        return tokens

    def pre_fusion(self, tokens):
        keys = list(tokens)
        b, n, d = tokens[keys[0]].shape
        x = T.concat([tokens[k] for k in keys], axis=0)
        for blk in self.pre_blocks:
            x = blk(x)
        return {k: x[i * b:(i + 1) * b] for i, k in enumerate(keys)}

    def linear_fuse(self, tokens):
        """Fuse each row's input panel into its label streams."""
        cfg = self.config
        streams = {}
        for r in (0, 1):
            inp = tokens[("I", r)]
            if cfg.mode != "chained":
                (k,) = cfg.label_kinds
                streams[(k, r)] = T.add(inp, tokens[(k, r)])
                continue
            o, y = tokens[("O", r)], tokens[("Y", r)]
            if cfg.fusion == "none":
                streams[("O", r)] = T.add(inp, o)
                streams[("Y", r)] = T.add(inp, y)
            else:
                streams[("O", r)] = T.add(T.add(inp, o), T.scale(y, self.alpha_y))
                streams[("Y", r)] = T.add(T.add(inp, T.scale(o, self.alpha_o)), y)
        return streams

    def caa_fuse(self, streams):
        """Add cross-attention from each stream into the other row's concatenated streams."""
        if self.config.fusion != "caa":
            return streams
        kinds = self.config.label_kinds
        n = streams[(kinds[0], 0)].shape[1]
        rows = {r: T.concat([streams[(k, r)] for k in kinds], axis=1) for r in (0, 1)}
        out = {}
        for r in (0, 1):
            attn = self.caa(rows[r], rows[1 - r])
            for i, k in enumerate(kinds):
                out[(k, r)] = T.add(streams[(k, r)], attn[:, i * n:(i + 1) * n])
        return out

    def encode(self, grids, plans):
        """Fused token sequence ``[B, 2*S*n, d]`` ordered row 0 streams then row 1 streams."""
        tokens = self.pre_fusion(self.embed_and_mask(grids, plans))
        streams = self.caa_fuse(self.linear_fuse(tokens))
        kinds = self.config.label_kinds
        return T.concat([streams[(k, r)] for r in (0, 1) for k in kinds], axis=1)

    def query_slice(self):
        s = len(self.config.label_kinds) * self.config.n_tokens
        return slice(s, 2 * s)

    def post_block(self, i, x):
        return self.post_blocks[i](x)

    def finish_encoder(self, x):
        return self.post_norm(x)

    def _unpatchify(self, x):
        cfg = self.config
        m, n, _ = x.shape
        gh, gw = cfg.lattice
        p, c = cfg.patch, cfg.dec_channels
        x = x.reshape(m, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(m, cfg.panel_h, cfg.panel_w, c)

    def decode_tokens(self, x):
        """Shared decoder: ``[M, n, d]`` streams -> (pixels ``[M, h, w, 3]``, features ``[M, h, w, c]``)."""
        for blk in self.dec_blocks:
            x = blk(x)
        feat = self._unpatchify(self.dec_embed(self.dec_norm(x)))
        feat = T.gelu(self.dec_conv(feat))
        return T.sigmoid(self.dec_pred(feat)), feat

    def pixel_head(self, feat):
        return self.pix_conv2(T.gelu(self.pix_conv1(feat)))

    def decode(self, x, rows=(0, 1), pixel_head=False, tasks=None):
        """Decode the label streams of ``rows``; ``tasks`` optionally restricts the panel kinds."""
        cfg = self.config
        kinds = cfg.label_kinds if tasks is None else tuple(k for k in cfg.label_kinds if k in tasks)
        s = len(cfg.label_kinds)
        if not kinds:
            raise ContractError("nothing to decode")
        b = x.shape[0]
        n = cfg.n_tokens
        parts = []
        for k in kinds:
            for r in rows:
                start = (r * s + cfg.label_kinds.index(k)) * n
                parts.append(x[:, start:start + n])
        pix, feat = self.decode_tokens(T.concat(parts, axis=0))
        nr = len(rows)
        h, w = cfg.panel_h, cfg.panel_w
        results = {}
        for i, k in enumerate(kinds):
            chunk = pix[i * nr * b:(i + 1) * nr * b]
            results[k] = chunk.reshape(nr, b, h, w, 3).transpose(1, 0, 4, 2, 3)
        logits = None
        if pixel_head and "Y" in kinds:
            i = kinds.index("Y")
            yfeat = feat[i * nr * b:(i + 1) * nr * b]
            lg = self.pixel_head(yfeat)
            logits = lg.reshape(nr, b, h, w, 2).transpose(1, 0, 4, 2, 3)
        return ForwardOutput(results.get("O"), results.get("Y"), logits, tuple(rows))

    def forward(self, grids, plans, pixel_head=True, rows=(0, 1), post_hook=None, tasks=None):
        x = self.encode(grids, plans)
        for i in range(len(self.post_blocks)):
            x = self.post_block(i, x)
            if post_hook is not None:
                x = post_hook(i, x)
        x = self.finish_encoder(x)
        return self.decode(x, rows=rows, pixel_head=pixel_head, tasks=tasks)

    __call__ = forward


def _tile_rows(offset, b):
    """Repeat an ``[n, d]`` tensor into ``[b, n, d]`` (differentiable)."""
    n, d = offset.shape
    return T.concat([offset.reshape(1, n, d)] * b, axis=0)
