//! Bundled grid layouts.

use crate::gridworld::{GridError, GridSpec};

pub const ANGLE_CLIFF: &str = include_str!("../grids/angle_cliff.txt");
pub const MAZE_8X8: &str = include_str!("../grids/maze_8x8.txt");
pub const HALLWAYS: &str = include_str!("../grids/hallways.txt");

/// Names of the bundled layouts in table order.
pub const BUNDLED: [&str; 3] = ["angle_cliff", "maze_8x8", "hallways"];

pub fn bundled_text(name: &str) -> Option<&'static str> {
    match name {
        "angle_cliff" => Some(ANGLE_CLIFF),
        "maze_8x8" => Some(MAZE_8X8),
        "hallways" => Some(HALLWAYS),
        _ => None,
    }
}

pub fn bundled(name: &str) -> Option<Result<GridSpec, GridError>> {
    bundled_text(name).map(GridSpec::parse)
}
