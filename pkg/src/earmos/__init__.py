"""Auditory-perception-guided MOS prediction for synthetic speech.

The pipeline simulates the cochlea (ERB-spaced gammatone filterbank,
rectification, compression), encodes the result into a fixed auditory
embedding, measures semantic distortion as the residual of vector-quantized
SSL embeddings, fuses both views with band-masked cross-attention, and
decodes a scalar MOS in (1, 5).
"""

__version__ = "0.1.0"

from earmos.audio import Waveform, load_wav, resample
from earmos.cochlea import Cochleagram, cochleagram, make_erb_scale
from earmos.embeddings import SyntheticSample, synth_dataset
from earmos.encoder import AuditoryEmbedding
from earmos.metrics import PredictionRecord, metrics_report
from earmos.rvq import EmbeddingSequence, RvqCodebook
from earmos.training import Predictor, TrainConfig, predict
