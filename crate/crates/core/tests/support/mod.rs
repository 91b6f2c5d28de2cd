pub mod desk;
pub mod gradients;
