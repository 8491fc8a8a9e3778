"""Decoding strategies and evaluation metrics for open-ended text generation."""

import json

from ._decodekit import (
    Error,
    GenerationError,
    InputError,
    Model,
    ProtocolError,
    TransportError,
    UndefinedResultError,
    __version__,
    binomial_two_sided_p,
    cd_candidate_set,
    cd_select,
    cd_step,
    coherence,
    cosine_similarity,
    cs_step,
    frontier_from_histograms,
    frontier_score,
    greedy_step,
    interior_mixture_grid,
    nucleus_support,
    rep_n,
    run_cli,
    topk_support,
    typical_support,
)
from . import _decodekit


def load_model(spec):
    """Builds a model from a spec dict ({"type": "table" | "ngram" | "remote", ...})."""
    return _decodekit._load_model(json.dumps(spec))


def generate(model, prompt, strategy="greedy", max_length=256, seed=0, amateur=None, **params):
    """Runs one generation and returns the record as a dict."""
    spec = {"strategy": strategy, **params}
    return json.loads(_decodekit._generate(model, list(prompt), json.dumps(spec), max_length, seed, amateur))


def diversity(tokens):
    return json.loads(_decodekit._diversity(list(tokens)))


def sign_test(wins_a, wins_b, neutrals=0):
    return json.loads(_decodekit._sign_test(wins_a, wins_b, neutrals))


def run_benchmark(config_path):
    """Runs a benchmark config file and returns the report dict."""
    return json.loads(_decodekit._run_benchmark(str(config_path)))
