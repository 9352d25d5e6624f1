"""latentsteer: text-guided image synthesis by gradient steering of a
vector-quantized latent grid."""

__version__ = "0.1.0"
