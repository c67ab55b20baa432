"""Novel-class discovery for semantic segmentation on synthetic feature maps.

Pipeline: supervised base training, saliency-guided clustering pseudo-labels
for unlabeled novel classes, then fine-tuning with entropy-ranked clean and
unclean splits, dynamic reassignment, and mean-teacher self-training.
"""

from .core import IGNORE_ID, ClassSpace, Dataset, DatasetItem

__version__ = "0.1.0"

__all__ = ["IGNORE_ID", "ClassSpace", "Dataset", "DatasetItem", "__version__"]
