"""Multi-expert conversational recommender: conversation, knowledge-graph and
review experts fused by a learned gate, plus a response generator."""

from .chairbot import ChairBot
from .config import RunConfig
from .conv_expert import ConvExpert
from .corpus import Corpus, SyntheticSpec, generate_synthetic, load_corpus, split_corpus, write_corpus
from .evaluation import PopularityRecommender, distinct_n, evaluate_recommender, recall_at_k
from .generator import ResponseGenerator
from .graph_expert import GraphExpert
from .review_expert import ReviewExpert

__version__ = "0.1.0"

__all__ = [
    "ChairBot",
    "Corpus",
    "ConvExpert",
    "GraphExpert",
    "PopularityRecommender",
    "ResponseGenerator",
    "ReviewExpert",
    "RunConfig",
    "SyntheticSpec",
    "distinct_n",
    "evaluate_recommender",
    "generate_synthetic",
    "load_corpus",
    "recall_at_k",
    "split_corpus",
    "write_corpus",
]
