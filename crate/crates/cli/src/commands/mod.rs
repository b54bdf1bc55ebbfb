pub mod dataset;
pub mod encode;
pub mod evaluate;
pub mod factors;
pub mod plan;
pub mod report;
pub mod synopsis;
