pub mod io;
pub mod model;
pub mod piecewise;
pub mod plot;
pub mod simulate;
pub mod solver;
pub mod specfun;
pub mod verify;
