"""Environment-generalisable CSI feedback: decoupling, alignment, codecs and experiments."""
from .alignment import AlignmentMetadata, CodebookConfig, align, metadata_bits, recover
from .channel import EnvironmentSpec, PathParams, SystemConfig, generate_dataset, synthesize_channel
from .codec import CodecSpec, decode, encode, train
from .decoupling import decouple, svd_complex
from .pipeline import FeedbackMessage, eg_decode, eg_encode, nmse, overhead_report
from .transforms import to_angular_delay, to_spatial_frequency

__version__ = "0.1.0"
