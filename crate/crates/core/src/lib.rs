pub mod model;
pub mod nn;
pub mod nonmono;
pub mod rpm;
pub mod tensor;
pub mod train;
pub mod verify;
