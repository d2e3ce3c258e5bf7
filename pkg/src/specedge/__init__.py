"""Edge-assisted speculative decoding with proactive drafting and pipeline-aware verification."""

from .draft import DraftNode, DraftParams, DraftTree, best_path, build_draft_tree
from .lm import NGramModel, Rng, TableModel, apply_temperature, next_dist, sample
from .verify import VerifyOutcome, enumerate_emission_dist, verify_tree

__version__ = "0.1.0"
