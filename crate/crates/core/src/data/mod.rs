//! Synthetic geo-aligned samples, multi-crop views and cross-view correspondence.

mod augment;
mod correspondence;
mod io;
mod sample;

pub use augment::{
    crop_resize, gaussian_blur, make_views, orient3, AugSpec, TemporalIndices, View, ViewGeometry,
    ViewSet,
};
pub use correspondence::{correspondence, correspondence_grids};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, ElemType, DATASET_MAGIC};
pub use sample::{generate_dataset, DatasetSpec, GeoSample};
