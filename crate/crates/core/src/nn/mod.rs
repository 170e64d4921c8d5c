//! Small CPU neural-network toolkit: im2col convolutions, pooling, dense
//! layers, softmax, SGD/Adam and a checkpoint container. Single-threaded and
//! bit-reproducible.

pub mod checkpoint;
pub mod layers;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use layers::{argmax, softmax_rows, Conv2d, Dense, MaxPool2d, Trainable};
pub use optim::{Adam, Sgd};
