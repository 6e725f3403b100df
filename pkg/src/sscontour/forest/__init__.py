"""Structured random forests with semi-supervised node splitting."""

from .model import Forest, load_forest, save_forest
from .train import ForestConfig, train_forest, train_weak_detector
from .tree import Tree, TreeParams, grow_tree

__all__ = ["Forest", "ForestConfig", "Tree", "TreeParams", "grow_tree", "load_forest",
           "save_forest", "train_forest", "train_weak_detector"]
