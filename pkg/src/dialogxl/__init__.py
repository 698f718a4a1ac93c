"""Dialog-aware Transformer-XL style emotion recognition in conversation, on a small numpy autodiff core."""
from .attention import HeadAllocation, build_masks, mask_oracle
from .data import Conversation, LabelSet, Utterance, Vocabulary, load_conversations, synth_generate
from .memory import MemoryBank, SegmentMemory, waste_rate
from .metrics import evaluation_report, micro_f1, weighted_f1
from .model import DialogXLModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, analyze_memory, train_model

__version__ = "0.1.0"
