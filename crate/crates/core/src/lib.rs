//! Detection mathematics and dataset tooling for single-stage, single-scale hand-gesture
//! detectors trained on YOLO-format data.
//!
//! * [`geometry`]: boxes, IoU/GIoU, non-maximum suppression
//! * [`annotation`]: YOLO TXT, label maps, manifests, VOC/COCO conversion
//! * [`imaging`]: PPM/PGM rasters, grayscale, resize, quarter-turn rotation, frame picking
//! * [`dataset`]: augmentation, seeded splitting, statistics
//! * [`detector`]: grid/anchor head, target assignment, decoding, layer arithmetic
//! * [`losses`]: confidence/classification/localisation/GIoU losses and their gradients
//! * [`eval`]: matching, precision/recall, accuracy, AP, confusion matrices
//! * [`cli`]: the `signdet` command line

pub mod annotation;
pub mod cli;
pub mod geometry;
pub mod dataset;
pub mod detector;
pub mod eval;
pub mod imaging;
pub mod losses;
