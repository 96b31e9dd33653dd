pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;

pub use graph::{Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig, GradBuffer};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Mat, Real};
pub use tokenizer::Vocab;
pub use transformer::{Backend, Decoder, Encoder, SequenceDecoder, SequenceEncoder, TransformerConfig};
