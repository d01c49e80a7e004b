"""Device-based image matching from camera sensor pattern noise.

A device-classification CNN is truncated into a 1024-d signature extractor;
a Siamese head scores signature pairs for "same physical camera".
"""
from .data import (
    ImageRecord,
    Manifest,
    SynthConfig,
    build_manifest,
    filter_min_images,
    generate_synthetic,
    stratified_split,
)
from .estimators import SignatureNetwork, SimilarityNetwork
from .evaluation import (
    EvalReport,
    SimilarityMatrix,
    overall_accuracy,
    render_heatmap,
    same_model_report,
    similarity_matrix,
)
from .signature import (
    Phase1Config,
    Signature,
    SignatureNet,
    build_signature_net,
    extract_signature,
    train_phase1,
    truncate,
)
from .similarity import (
    Phase2Config,
    SignaturePair,
    SimilarityNet,
    SimilarityNetSpec,
    Threshold,
    build_similarity_net,
    make_pairs,
    score,
    select_threshold,
    train_phase2,
)
from .store import SignatureStore, StoreRecord

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "ImageRecord",
    "Manifest",
    "Phase1Config",
    "Phase2Config",
    "Signature",
    "SignatureNet",
    "SignatureNetwork",
    "SignaturePair",
    "SignatureStore",
    "SimilarityMatrix",
    "SimilarityNet",
    "SimilarityNetSpec",
    "SimilarityNetwork",
    "StoreRecord",
    "SynthConfig",
    "Threshold",
    "build_manifest",
    "build_signature_net",
    "build_similarity_net",
    "extract_signature",
    "filter_min_images",
    "generate_synthetic",
    "make_pairs",
    "overall_accuracy",
    "render_heatmap",
    "same_model_report",
    "score",
    "select_threshold",
    "similarity_matrix",
    "stratified_split",
    "train_phase1",
    "train_phase2",
    "truncate",
]
