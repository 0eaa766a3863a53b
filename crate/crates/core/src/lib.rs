pub mod artifact;
pub mod error;
pub mod lemma;
pub mod measure;
pub mod rearrange;
pub mod step;
pub mod trig;
pub mod universal;
