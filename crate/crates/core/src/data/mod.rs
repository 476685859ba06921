//! Synthetic head-CT phantoms and the windowing that turns them into
//! network inputs.

mod batch;
mod phantom;
mod store;
mod window;

pub use batch::WindowBatch;
pub use phantom::{
    generate_studies, generate_study, generate_study_with_truth, BleedTruth, ConfounderTruth,
    PhantomConfig, PhantomTruth, Study,
};
pub use store::{load_dataset, read_study, write_study, MANIFEST_FILE, MASKS_FILE, SLICES_FILE};
pub use window::{apply_brain_window, make_slice_windows, window_value, BrainWindow, SliceWindow};
