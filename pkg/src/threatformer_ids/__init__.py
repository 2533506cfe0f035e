"""Flow-sequence intrusion detection with a Transformer encoder.

Pipeline: parse or synthesize flow records, split them chronologically,
fit preprocessing on the training period only, window each traffic group
into fixed-length sequences, train with weighted BCE + masked
reconstruction + PGD adversarial objectives, then evaluate and attribute.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
