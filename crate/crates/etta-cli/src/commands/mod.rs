pub mod adapt;
pub mod flops;
pub mod gen_data;
pub mod pretrain;
pub mod report;
pub mod stats;
