pub mod bestrq;
pub mod checkpoint;
pub mod chunking;
pub mod ctc;
pub mod encoder;
pub mod eval;
pub mod exec;
pub mod frontend;
pub mod model;
pub mod ngram;
pub mod optim;
pub mod params;
pub mod stream;
pub mod tensor;
pub mod train;
