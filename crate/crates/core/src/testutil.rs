pub use crate::gradcheck::*;
