pub mod arch_space;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod ggm;
pub mod latency;
pub mod optim;
pub mod params;
pub mod relaxation;
pub mod search_engine;
pub mod seeds;
pub mod supernet;
pub mod tensor;
