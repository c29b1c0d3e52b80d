"""Python surface of the situation hyper-graph VQA core.

The heavy lifting lives in the C++ extension `_shgvqa`; this package adds
thin conveniences (JSON decoding of report strings).
"""

import json as _json

try:
    from . import _shgvqa as _core  # installed layout
except ImportError:  # built-tree layout: extension on sys.path
    import _shgvqa as _core

hungarian_match = _core.hungarian_match
build_block_causal_mask = _core.build_block_causal_mask
softmax = _core.softmax
gelu = _core.gelu
layer_norm = _core.layer_norm
generate_synthetic = _core.generate_synthetic
dump_hypergraph_json = _core.dump_hypergraph


def train(config_text, out_dir="", seed=-1):
    """Run a training job; returns the metrics report as a dict."""
    return _json.loads(_core.train(config_text, out_dir, seed))


def evaluate(config_text, checkpoint, data):
    """Evaluate a checkpoint on a dataset; returns the metrics report dict."""
    return _json.loads(_core.evaluate(config_text, checkpoint, data))


def dump_hypergraph(config_text, checkpoint, data, clip_id):
    """Predicted per-frame sets of one clip as a dict."""
    return _json.loads(_core.dump_hypergraph(config_text, checkpoint, data, clip_id))


__all__ = [
    "hungarian_match",
    "build_block_causal_mask",
    "softmax",
    "gelu",
    "layer_norm",
    "generate_synthetic",
    "train",
    "evaluate",
    "dump_hypergraph",
    "dump_hypergraph_json",
]
