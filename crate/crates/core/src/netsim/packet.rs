/// Which flow a packet belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowRef {
    Media(usize),
    Background(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FecTag {
    pub block: u64,
    pub index: u32,
    pub parity: bool,
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub flow: FlowRef,
    pub seq: u64,
    pub bytes: u32,
    /// Time the packet entered the network (ms).
    pub sent_at: f64,
    /// 0 = priority band, 1 = best effort.
    pub band: u8,
    /// WRED class.
    pub priority: u8,
    /// Uniform draw compared against the link loss rate at departure.
    pub loss_u: f64,
    /// Uniform draw compared against the flow's access-leg loss.
    pub access_u: f64,
    pub fec: Option<FecTag>,
}
