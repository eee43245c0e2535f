"""Dialog state tracking by scoring candidate slot-value pairs with a compact
Transformer encoder, plus masked-LM logit distillation to shrink it."""

from .dst import (
    Candidate,
    Dialog,
    DialogState,
    DialogTurn,
    Ontology,
    enumerate_candidates,
    joint_goal_accuracy,
    predict_turn,
    track_dialog,
    turn_request_accuracy,
    update_state,
)
from .encoder import EncoderConfig, ModelParams, count_params, init_params
from .tokenizer import Vocab, build_vocab, pack_pair, pack_single, tokenize

__version__ = "0.1.0"
