pub mod data;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
