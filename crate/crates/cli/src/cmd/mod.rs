pub mod batch;
pub mod pool;
pub mod report;
pub mod translate;
