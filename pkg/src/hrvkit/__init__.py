"""Head relevance vectors for cross-attention diffusion pipelines."""

from .core import (CAMap, HeadId, HRVMatrix, RawHRVTensor, RescalingVector, head_order,
                   merge_raw, normalize_hrv, rescaling_vector, softmax_ca_map)
from .kernels import BACKEND
from .vocab import ConceptVocabulary, Word, default_vocabulary

__version__ = "0.1.0"
