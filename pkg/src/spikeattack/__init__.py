"""Noise robustness and black-box adversarial attacks on MNIST classifiers.

Two networks: a sigmoid feed-forward DNN and a spiking deep belief network trained with
Siegert-rate units.
"""
from .attack import AttackConfig, AttackTrace, generate_adversarial
from .dataset import Image, LabeledImageSet, NoiseSpec, Window, apply_noise, load_mnist, rescale
from .dnn import DnnModel, TrainConfig, dnn_init, dnn_oracle, dnn_train
from .sdbn.network import SdbnModel, SdbnTrainConfig, sdbn_oracle, sdbn_pretrain
from .sdbn.neuron import NeuronParams, siegert, siegert_rate

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "DnnModel",
    "Image",
    "LabeledImageSet",
    "NeuronParams",
    "NoiseSpec",
    "SdbnModel",
    "SdbnTrainConfig",
    "TrainConfig",
    "Window",
    "apply_noise",
    "dnn_init",
    "dnn_oracle",
    "dnn_train",
    "generate_adversarial",
    "load_mnist",
    "rescale",
    "sdbn_oracle",
    "sdbn_pretrain",
    "siegert",
    "siegert_rate",
]
