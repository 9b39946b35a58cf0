"""Analytic inference cost of a :class:`ContextModel` configuration.

Counts multiply-accumulates of every matrix product and convolution on one
composite grid (pixel head excluded, it only runs in training) and reports
FLOPs as ``2 * MACs``.
"""

from .compositor import LAYOUTS


def _linear(tokens, d_in, d_out):
    return tokens * d_in * d_out


def _attention_macs(n_q, n_kv, d):
    """Scores and weighted sum for ``n_q`` queries over ``n_kv`` keys (heads split ``d``)."""
    return 2 * n_q * n_kv * d


def block_macs(seqs, n, d, mlp_ratio):
    """Pre-norm block over ``seqs`` independent sequences of ``n`` tokens."""
    t = seqs * n
    hidden = int(d * mlp_ratio)
    return (_linear(t, d, 3 * d) + seqs * _attention_macs(n, n, d) + _linear(t, d, d)
            + _linear(t, d, hidden) + _linear(t, hidden, d))


def mac_breakdown(config, caa=None):
    """MACs per component; ``caa`` overrides whether the cross-attention is counted."""
    cfg = config
    caa = (cfg.fusion == "caa") if caa is None else caa
    n, d, p = cfg.n_tokens, cfg.dim, cfg.patch
    panels = len(LAYOUTS[cfg.mode])
    streams = len(cfg.label_kinds)
    c = cfg.dec_channels
    px = cfg.panel_h * cfg.panel_w
    out = {
        "patch_embed": _linear(2 * panels * n, p * p * 3, d),
        "pre_fusion": cfg.pre_depth * block_macs(2 * panels, n, d, cfg.mlp_ratio),
        "post_fusion": cfg.post_depth * block_macs(1, 2 * streams * n, d, cfg.mlp_ratio),
        "decoder_blocks": cfg.dec_depth * block_macs(2 * streams, n, d, cfg.mlp_ratio),
        "decoder_head": (_linear(2 * streams * n, d, p * p * c)
                         + 2 * streams * px * 9 * c * c
                         + _linear(2 * streams * px, c, 3)),
        "caa": 0,
    }
    if caa:
        q_tokens = 2 * streams * n      # both rows' streams act as queries
        kv_tokens = 2 * streams * n     # each row is keyed by the other row's streams
        out["caa"] = (_linear(q_tokens, d, d) + 2 * _linear(kv_tokens, d, d)
                      + 2 * _attention_macs(streams * n, streams * n, d) + _linear(q_tokens, d, d))
    return out


def flop_breakdown(config, caa=None):
    return {k: 2 * v for k, v in mac_breakdown(config, caa).items()}


def flop_estimate(config, caa=None):
    return sum(flop_breakdown(config, caa).values())


def caa_overhead(config):
    """Relative FLOP increase (fraction) of the CAA-on model over the CAA-off model."""
    on, off = flop_estimate(config, True), flop_estimate(config, False)
    return (on - off) / off
