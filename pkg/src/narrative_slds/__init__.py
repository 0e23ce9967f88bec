"""Switching linear dynamical systems for narrative text."""
from .config import Config, load_config
from .corpus import Story, Vocabulary, load_corpus, generate_synthetic_corpus, default_synthetic_spec
from .gaussian import Gaussian, gibbs_z_conditional
from .gibbs import InterpolationTask, interpolate, baseline_interpolate
from .inference import SldsModel, LanguageModel, build_model, train
from .scaffold import MarkovPrior, Sentiment, fit_markov_prior, load_lexicon, tag_sentence

__all__ = [
    "Config", "load_config", "Story", "Vocabulary", "load_corpus", "generate_synthetic_corpus",
    "default_synthetic_spec", "Gaussian", "gibbs_z_conditional", "InterpolationTask", "interpolate",
    "baseline_interpolate", "SldsModel", "LanguageModel", "build_model", "train", "MarkovPrior",
    "Sentiment", "fit_markov_prior", "load_lexicon", "tag_sentence",
]
__version__ = "0.1.0"
