pub mod linalg;
pub mod master;
pub mod pipeline;
pub mod protocol;
pub mod transport;
pub mod worker;
