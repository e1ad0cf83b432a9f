//! Acquisition chain: scan scheduling, frame wire format and streaming.

pub mod frame;
pub mod scan;
pub mod stream;

pub use frame::{decode_frame, encode_frame, Frame, FrameError};
pub use scan::{scan_cycle, ScanError, ScanSchedule, Simulator, VirtualClock};
pub use stream::{stream_serve, StreamConfig, StreamHandle, Subscriber};
