//! Model, weight and image files.

pub mod image;
pub mod model;
pub mod weights;

pub use self::image::{read_image, write_image};
pub use model::{load_model, save_model, weights_path_for};
