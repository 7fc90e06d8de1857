//! Desk-scale toolkit for adapting a causal language model to a new language:
//! byte-level BPE vocabulary expansion, embedding growth, LoRA fine-tuning
//! under a multi-step curriculum, and an evaluation suite.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod sustainability;
pub mod tensor;
pub mod tokenizer;
pub mod training;
