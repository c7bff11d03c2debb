from .schema import (
    FUNDUS_SIGNS,
    OCT_SIGNS,
    SPLITS,
    VOCABULARY,
    BiModalGroup,
    DatasetManifest,
    DiseaseLabel,
    ImageRecord,
    LesionBox,
    Modality,
    SignLabelVector,
    disease_from_signs,
    read_manifest,
    write_manifest,
)
from .splits import split_dataset
from .store import ImageStore
from .synthetic import SyntheticSpec, generate_synthetic_dataset, write_dataset
from .transforms import INPUT_SIZE, augment, load_pixels, preprocess
