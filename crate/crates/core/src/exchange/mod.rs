//! On-disk interchange between feature/mask backends and the pipeline.

mod annotations;
mod manifest;
mod tensor;

pub use annotations::{
    read_annotation_set, write_annotation_set, AnnotationSet, PseudoAnnotation, Stage, ANNOTATIONS_FILE,
};
pub use manifest::{
    load_image_record, load_record, load_vocabulary, read_json, read_label_map, read_manifest, save_image, write_json,
    write_label_map, write_manifest, write_vocabulary, AutoMaskEntry, DatasetManifest, ImageBundle, ImageExport,
    ImageRecord, PixelPoint, PointMaskEntry, PointMaskSet, VocabularyFile, FORMAT_VERSION, MANIFEST_FILE, VOCAB_FILE,
};
pub use tensor::{f32_tensor, read_tensor, write_tensor, DType, TensorData, TensorFile, MAGIC, VERSION};
