"""Bulk feature extraction and deep-block reduction over a manifest."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data_model import DEEP_RAW_DIM, DEEP_REDUCED_DIM, read_deep_block
from .errors import DataError
from .features import default_configs, extract_handcrafted
from .pca import fit_pca, transform
from .pipeline import FeatureTable

log = logging.getLogger(__name__)


def _extract_one(args):
    manifest, sid, configs = args
    vec = extract_handcrafted(manifest.load_slice(sid), configs)
    return sid, vec.values, vec.flags


def _extract_chunk(args):
    manifest, sids, configs = args
    return [_extract_one((manifest, sid, configs)) for sid in sids]


def extract_all(manifest, configs=None, threads=1, slice_ids=None):
    """{slice_id: 46-vector} and {slice_id: flags} for the requested slices.

    Results do not depend on ``threads``; work is split into fixed chunks
    and reassembled in manifest order.
    """
    configs = tuple(configs or default_configs())
    sids = list(slice_ids if slice_ids is not None else manifest.slice_ids)
    values, flags = {}, {}
    if threads > 1 and len(sids) > 1:
        chunk = max(1, len(sids) // (threads * 4))
        parts = [sids[i:i + chunk] for i in range(0, len(sids), chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(_extract_chunk, [(manifest, p, configs) for p in parts])
                       for r in part]
    else:
        results = [_extract_one((manifest, sid, configs)) for sid in sids]
    for sid, vals, fl in results:
        values[sid] = vals
        if fl:
            flags[sid] = fl
    return values, flags


def load_deep_matrix(manifest, slice_ids=None):
    """Stack deep blocks into a matrix; all blocks must share one kind."""
    sids = list(slice_ids if slice_ids is not None else manifest.slice_ids)
    kinds = set()
    rows = []
    for sid in sids:
        block = read_deep_block(manifest.sources[sid].deep_path, sid)
        kinds.add(block.kind)
        rows.append(block.activations)
    if len(kinds) > 1:
        raise DataError("manifest mixes raw and reduced deep blocks")
    kind = kinds.pop() if kinds else "fc6"
    dim = DEEP_RAW_DIM if kind == "fc6" else DEEP_REDUCED_DIM
    X = np.vstack(rows) if rows else np.zeros((0, dim))
    return sids, X, kind


def fit_pca_subsample(X, n_components=DEEP_REDUCED_DIM, max_rows=2000, seed=0):
    """Fit on at most ``max_rows`` rows drawn without replacement (seeded)."""
    if max_rows and X.shape[0] > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_rows, replace=False))
        X = X[idx]
    return fit_pca(X, n_components)


def reduce_deep(X, kind, model):
    if kind == "pca":
        return X
    if model is None:
        raise DataError("raw deep blocks need a PCA model")
    return transform(model, X)


def build_table(manifest, deep_reduced, handcrafted):
    """FeatureTable over the manifest's slices from per-slice blocks."""
    return FeatureTable.from_blocks(deep_reduced, handcrafted, manifest.slice_ids)
