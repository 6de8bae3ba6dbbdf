pub mod criteria;
pub mod gradref;
pub mod oracles;
