pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod meta_net;
pub mod tensor;
pub mod training;
pub mod verify;
