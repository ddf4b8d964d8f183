"""Infer what attention heads do from their parameters alone.

A head's OV circuit ``W_VO`` is projected into vocabulary space
(``M = E' W_VO U``, evaluated row by row) and scored against token-pair
relations, summarized by saliency statistics, and optionally described in
words by a chat model. Synthetic planted models serve as ground truth.
"""

from .describe import DescribeResponse, EndpointConfig, describe_head, format_prompt, identification_rate, parse_response
from .errors import DataError, DescribeError, HeadmapsError
from .model_io import HeadRef, ModelGeometry, WeightStore, effective_embeddings, head_vo, kv_group, load_model
from .projector import (
    OVCircuit,
    RelationScore,
    classify,
    input_skewness,
    mapping_row,
    output_space_size,
    random_baseline_heads,
    relation_score,
    saliency,
    salient_mappings,
    topk_targets,
)
from .sweep import SweepConfig, SweepResult, category_grid, count_by_relation, run_sweep, score_distribution, summary_stats
from .toy import PlantSpec, ToyModelSpec, build_toy
from .vocab import RelationSpec, TokenizedRelation, Vocabulary, load_vocab, tokenize_relation

__version__ = "0.1.0"
