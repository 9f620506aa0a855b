"""Single-for-multiple radiology report generation at desk scale."""
from .dataset import Dataset, Example, SynthSpec, load_manifest, synthesize_dataset
from .generator import generate_batch, generate_beam, generate_greedy
from .knowledge import KnowledgeBase, RegionTag, load_knowledge, select_topics
from .model import S4M, ModelConfig
from .tokenizer import Vocab, build_vocab, decode, encode
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
