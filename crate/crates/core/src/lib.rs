//! Software twin of a round optical tactile sensor.
//!
//! The crate covers the membrane geometry, contact mechanics, a photometric
//! renderer for the internal fisheye camera, dataset generation with JSON
//! Lines manifests, and contact-state estimators (an analytic baseline and a
//! trainable convolutional regressor).

pub mod geometry;
pub mod mechanics;
pub mod image;
pub mod render;
pub mod markers;
pub mod dataset;
pub mod estimator;
