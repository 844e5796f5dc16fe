pub mod analysis;
mod binio;
pub mod channel;
pub mod coso;
pub mod error;
pub mod extraction;
pub mod filter;
pub mod image;
pub mod operator;
pub mod pgd;
pub mod rng;
pub mod transforms;

pub use error::{CsError, Result};
pub use image::Image;
