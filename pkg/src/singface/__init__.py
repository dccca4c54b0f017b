"""Music-driven singing-face parameter generation.

Voice and accompaniment stems are encoded separately, fused per task by
channel attention, and decoded into 3DMM expression, head pose and eye-state
tracks at 30 fps.
"""
from .audio import compute_mfcc, features_from_audio, load_wav, window_features
from .dataset import load_dataset, synth_dataset, SynthConfig
from .evaluation import MetricReport, cca_metric, evaluate, roughness, speed_cca, blink_stats
from .model import ModelConfig, SingingFaceGenerator
from .pipeline import GenerationResult, generate, inspect_attention
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"
