//! Wire formats spoken on the drone's three ports: AT command lines on the
//! command port, navdata datagrams, and the framed video stream header.
//!
//! Everything here is a pure function over byte buffers. Multi-byte integers
//! are little-endian throughout.

use std::fmt;

use thiserror::Error;

/// UDP port the client sends AT commands to.
pub const COMMAND_PORT: u16 = 5556;
/// UDP port navdata is exchanged on.
pub const NAVDATA_PORT: u16 = 5554;
/// TCP port the video stream is served on.
pub const VIDEO_PORT: u16 = 5555;

/// Datagram a client sends to the navdata port to start the telemetry stream.
pub const NAVDATA_TRIGGER: [u8; 4] = [0x01, 0x00, 0x00, 0x00];

/// Longest AT line accepted on the command port, including the trailing CR.
pub const MAX_AT_LINE: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("rejected input: {field} is not finite")]
    NonFinite { field: &'static str },
    #[error("config {field} contains a forbidden character")]
    ForbiddenChar { field: &'static str },
    #[error("sequence number must be at least 1")]
    ZeroSeq,
    #[error("encoded line is {len} bytes, limit is {MAX_AT_LINE}")]
    Oversize { len: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("line does not end with a single carriage return")]
    MissingTerminator,
    #[error("line is not ASCII")]
    NotAscii,
    #[error("line exceeds {MAX_AT_LINE} bytes")]
    Oversize,
    #[error("malformed syntax: {0}")]
    Syntax(&'static str),
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("bad seq: {0:?}")]
    BadSeq(String),
    #[error("missing argument: {0}")]
    MissingArgument(&'static str),
    #[error("unexpected extra argument")]
    ExtraArgument,
    #[error("bad value for {field}: {value:?}")]
    BadValue { field: &'static str, value: String },
    #[error("{field} out of range [-1, 1]: {value}")]
    OutOfRange { field: &'static str, value: f32 },
}

/// Renders a stick value the way the drone firmware expects it: the decimal
/// form of the signed integer sharing the value's binary32 bit pattern.
pub fn encode_float_arg(v: f32) -> Result<i32, EncodeError> {
    if !v.is_finite() {
        return Err(EncodeError::NonFinite { field: "float argument" });
    }
    Ok(v.to_bits() as i32)
}

/// Inverse of [`encode_float_arg`].
pub fn decode_float_arg(i: i32) -> f32 {
    f32::from_bits(i as u32)
}

/// Flag word carried by `AT*REF`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RefBits {
    pub takeoff: bool,
    pub emergency: bool,
}

impl RefBits {
    /// Bits 18, 20, 22, 24 and 28, which the firmware expects always set.
    pub const BASE_MASK: u32 = (1 << 18) | (1 << 20) | (1 << 22) | (1 << 24) | (1 << 28);
    const TAKEOFF_BIT: u32 = 1 << 9;
    const EMERGENCY_BIT: u32 = 1 << 8;

    pub const TAKEOFF: RefBits = RefBits { takeoff: true, emergency: false };
    pub const LAND: RefBits = RefBits { takeoff: false, emergency: false };
    pub const EMERGENCY: RefBits = RefBits { takeoff: false, emergency: true };

    pub fn value(self) -> u32 {
        let mut v = Self::BASE_MASK;
        if self.takeoff {
            v |= Self::TAKEOFF_BIT;
        }
        if self.emergency {
            v |= Self::EMERGENCY_BIT;
        }
        v
    }

    /// Decodes the takeoff/emergency flags. Other bits are ignored, as the
    /// firmware does.
    pub fn from_value(v: u32) -> RefBits {
        RefBits {
            takeoff: v & Self::TAKEOFF_BIT != 0,
            emergency: v & Self::EMERGENCY_BIT != 0,
        }
    }
}

/// Progressive movement command. Stick values are fractions of the maximum
/// tilt or rate; `progressive = false` asks the drone to hold position.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PcmdArgs {
    pub progressive: bool,
    pub roll: f32,
    pub pitch: f32,
    pub gaz: f32,
    pub yaw: f32,
}

impl PcmdArgs {
    pub const HOVER: PcmdArgs =
        PcmdArgs { progressive: false, roll: 0.0, pitch: 0.0, gaz: 0.0, yaw: 0.0 };

    /// Builds a progressive command with every stick clamped to [-1, 1].
    pub fn sticks(roll: f32, pitch: f32, gaz: f32, yaw: f32) -> PcmdArgs {
        PcmdArgs { progressive: true, roll, pitch, gaz, yaw }.clamped()
    }

    pub fn clamped(self) -> PcmdArgs {
        PcmdArgs {
            progressive: self.progressive,
            roll: clamp_stick(self.roll),
            pitch: clamp_stick(self.pitch),
            gaz: clamp_stick(self.gaz),
            yaw: clamp_stick(self.yaw),
        }
    }
}

// NaN passes through so the encoder can reject it.
fn clamp_stick(v: f32) -> f32 {
    if v.is_nan() {
        v
    } else {
        v.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Ref(RefBits),
    Pcmd(PcmdArgs),
    Ftrim,
    Config { key: String, value: String },
    Comwdg,
    Ctrl,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ref(_) => "REF",
            Command::Pcmd(_) => "PCMD",
            Command::Ftrim => "FTRIM",
            Command::Config { .. } => "CONFIG",
            Command::Comwdg => "COMWDG",
            Command::Ctrl => "CTRL",
        }
    }
}

/// A sequenced AT command as sent on the command port.
#[derive(Debug, Clone, PartialEq)]
pub struct AtCommand {
    pub seq: u32,
    pub command: Command,
}

impl AtCommand {
    pub fn new(seq: u32, command: Command) -> AtCommand {
        AtCommand { seq, command }
    }
}

impl fmt::Display for AtCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match encode_at(self) {
            Ok(line) => f.write_str(String::from_utf8_lossy(&line[..line.len() - 1]).as_ref()),
            Err(e) => write!(f, "<unencodable {}: {e}>", self.command.name()),
        }
    }
}

fn check_config_text(s: &str, field: &'static str) -> Result<(), EncodeError> {
    if s.bytes().any(|b| b == b'"' || b == b'\r' || !b.is_ascii()) {
        return Err(EncodeError::ForbiddenChar { field });
    }
    Ok(())
}

/// Encodes one command as `AT*NAME=seq[,args]\r`.
pub fn encode_at(cmd: &AtCommand) -> Result<Vec<u8>, EncodeError> {
    if cmd.seq == 0 {
        return Err(EncodeError::ZeroSeq);
    }
    let mut line = format!("AT*{}={}", cmd.command.name(), cmd.seq);
    match &cmd.command {
        Command::Ref(bits) => {
            line.push_str(&format!(",{}", bits.value()));
        }
        Command::Pcmd(args) => {
            let args = args.clamped();
            let enc = |v: f32, field: &'static str| {
                encode_float_arg(v).map_err(|_| EncodeError::NonFinite { field })
            };
            line.push_str(&format!(
                ",{},{},{},{},{}",
                u8::from(args.progressive),
                enc(args.roll, "roll")?,
                enc(args.pitch, "pitch")?,
                enc(args.gaz, "gaz")?,
                enc(args.yaw, "yaw")?,
            ));
        }
        Command::Config { key, value } => {
            check_config_text(key, "key")?;
            check_config_text(value, "value")?;
            line.push_str(&format!(",\"{key}\",\"{value}\""));
        }
        Command::Ftrim | Command::Comwdg | Command::Ctrl => {}
    }
    line.push('\r');
    if line.len() > MAX_AT_LINE {
        return Err(EncodeError::Oversize { len: line.len() });
    }
    Ok(line.into_bytes())
}

/// Splits a command datagram into its CR-terminated lines. A trailing
/// fragment without CR is returned as-is so the parser can report it.
pub fn split_at_lines(datagram: &[u8]) -> impl Iterator<Item = &[u8]> {
    datagram.split_inclusive(|&b| b == b'\r').filter(|l| !l.is_empty())
}

struct ArgCursor<'a> {
    rest: &'a str,
    done: bool,
}

impl<'a> ArgCursor<'a> {
    fn next_raw(&mut self, name: &'static str) -> Result<&'a str, ParseError> {
        if self.done {
            return Err(ParseError::MissingArgument(name));
        }
        match self.rest.find(',') {
            Some(i) => {
                let (head, tail) = self.rest.split_at(i);
                self.rest = &tail[1..];
                Ok(head)
            }
            None => {
                self.done = true;
                Ok(self.rest)
            }
        }
    }

    fn next_quoted(&mut self, name: &'static str) -> Result<&'a str, ParseError> {
        if self.done {
            return Err(ParseError::MissingArgument(name));
        }
        let body = self
            .rest
            .strip_prefix('"')
            .ok_or(ParseError::Syntax("expected opening quote"))?;
        let end = body.find('"').ok_or(ParseError::Syntax("unterminated quoted string"))?;
        let value = &body[..end];
        let after = &body[end + 1..];
        if after.is_empty() {
            self.done = true;
            self.rest = "";
        } else {
            self.rest = after
                .strip_prefix(',')
                .ok_or(ParseError::Syntax("expected ',' after quoted string"))?;
        }
        Ok(value)
    }

    fn next_i32(&mut self, name: &'static str) -> Result<i32, ParseError> {
        let raw = self.next_raw(name)?;
        raw.parse::<i32>()
            .map_err(|_| ParseError::BadValue { field: name, value: raw.to_string() })
    }

    fn next_stick(&mut self, name: &'static str) -> Result<f32, ParseError> {
        let v = decode_float_arg(self.next_i32(name)?);
        if !(-1.0..=1.0).contains(&v) {
            return Err(ParseError::OutOfRange { field: name, value: v });
        }
        Ok(v)
    }

    fn finish(self) -> Result<(), ParseError> {
        if self.done {
            Ok(())
        } else {
            Err(ParseError::ExtraArgument)
        }
    }
}

/// Parses one CR-terminated AT line.
pub fn parse_at(line: &[u8]) -> Result<AtCommand, ParseError> {
    if line.len() > MAX_AT_LINE {
        return Err(ParseError::Oversize);
    }
    let body = match line.split_last() {
        Some((b'\r', body)) if !body.contains(&b'\r') => body,
        _ => return Err(ParseError::MissingTerminator),
    };
    if !body.is_ascii() {
        return Err(ParseError::NotAscii);
    }
    // ASCII was checked above, so this cannot fail.
    let body = std::str::from_utf8(body).map_err(|_| ParseError::NotAscii)?;
    let body = body.strip_prefix("AT*").ok_or(ParseError::Syntax("missing AT* prefix"))?;
    let (name, rest) = body.split_once('=').ok_or(ParseError::Syntax("missing '='"))?;
    let (seq_text, args) = match rest.split_once(',') {
        Some((s, a)) => (s, Some(a)),
        None => (rest, None),
    };
    let seq = match seq_text.parse::<u32>() {
        Ok(s) if s >= 1 => s,
        _ => return Err(ParseError::BadSeq(seq_text.to_string())),
    };
    let mut cur = ArgCursor { rest: args.unwrap_or(""), done: args.is_none() };
    let command = match name {
        "REF" => {
            let raw = cur.next_i32("ref flags")?;
            Command::Ref(RefBits::from_value(raw as u32))
        }
        "PCMD" => {
            let flag = cur.next_i32("progressive flag")?;
            let progressive = match flag {
                0 => false,
                1 => true,
                _ => {
                    return Err(ParseError::BadValue {
                        field: "progressive flag",
                        value: flag.to_string(),
                    })
                }
            };
            Command::Pcmd(PcmdArgs {
                progressive,
                roll: cur.next_stick("roll")?,
                pitch: cur.next_stick("pitch")?,
                gaz: cur.next_stick("gaz")?,
                yaw: cur.next_stick("yaw")?,
            })
        }
        "CONFIG" => {
            let key = cur.next_quoted("config key")?.to_string();
            let value = cur.next_quoted("config value")?.to_string();
            Command::Config { key, value }
        }
        "FTRIM" => Command::Ftrim,
        "COMWDG" => Command::Comwdg,
        "CTRL" => Command::Ctrl,
        other => return Err(ParseError::UnknownCommand(other.to_string())),
    };
    cur.finish()?;
    Ok(AtCommand { seq, command })
}

// ---------------------------------------------------------------------------
// Navdata

pub const NAVDATA_HEADER: u32 = 0x5566_7788;
pub const NAVDATA_HEADER_LEN: usize = 16;
pub const TAG_DEMO: u16 = 0;
pub const TAG_CHECKSUM: u16 = 0xFFFF;
const CHECKSUM_OPTION_LEN: usize = 8;
const DEMO_PAYLOAD_LEN: usize = 36;

/// Navdata state-mask bits used by this stack.
pub mod state_bits {
    pub const FLYING: u32 = 1 << 0;
    pub const BATTERY_LOW: u32 = 1 << 15;
    pub const WATCHDOG: u32 = 1 << 30;
    pub const EMERGENCY: u32 = 1 << 31;
}

/// Control-state codes reported in the DEMO option.
pub mod ctrl_state {
    pub const DEFAULT: u32 = 0;
    pub const LANDED: u32 = 2;
    pub const FLYING: u32 = 3;
    pub const HOVERING: u32 = 4;
    pub const TAKING_OFF: u32 = 6;
    pub const LANDING: u32 = 8;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NavdataError {
    #[error("not navdata: header {0:#010x}")]
    NotNavdata(u32),
    #[error("integrity error: checksum option missing")]
    MissingChecksum,
    #[error("integrity error: checksum mismatch (stored {stored:#x}, computed {computed:#x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bounds error: {0}")]
    Bounds(&'static str),
    #[error("malformed option {tag:#06x}: {reason}")]
    BadOption { tag: u16, reason: &'static str },
}

impl NavdataError {
    /// True for failures detected by the checksum trailer.
    pub fn is_integrity(&self) -> bool {
        matches!(self, NavdataError::MissingChecksum | NavdataError::ChecksumMismatch { .. })
    }
}

/// Byte-sum checksum over everything preceding the checksum option.
pub fn navdata_checksum(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0u32, |acc, &b| acc.wrapping_add(u32::from(b)))
}

/// Payload of the DEMO option. Angles in milli-degrees, altitude in
/// millimetres, velocities in mm/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DemoData {
    pub ctrl_state: u32,
    pub battery_percent: u32,
    pub pitch_mdeg: f32,
    pub roll_mdeg: f32,
    pub yaw_mdeg: f32,
    pub altitude_mm: i32,
    pub vx_mm_s: f32,
    pub vy_mm_s: f32,
    pub vz_mm_s: f32,
}

impl DemoData {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.ctrl_state.to_le_bytes());
        out.extend_from_slice(&self.battery_percent.to_le_bytes());
        for v in [self.pitch_mdeg, self.roll_mdeg, self.yaw_mdeg] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.altitude_mm.to_le_bytes());
        for v in [self.vx_mm_s, self.vy_mm_s, self.vz_mm_s] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(p: &[u8]) -> DemoData {
        let u = |i: usize| u32::from_le_bytes([p[i], p[i + 1], p[i + 2], p[i + 3]]);
        let f = |i: usize| f32::from_bits(u(i));
        DemoData {
            ctrl_state: u(0),
            battery_percent: u(4),
            pitch_mdeg: f(8),
            roll_mdeg: f(12),
            yaw_mdeg: f(16),
            altitude_mm: u(20) as i32,
            vx_mm_s: f(24),
            vy_mm_s: f(28),
            vz_mm_s: f(32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NavOption {
    Demo(DemoData),
    /// Any other tag, kept verbatim.
    Opaque { tag: u16, payload: Vec<u8> },
}

impl NavOption {
    pub fn tag(&self) -> u16 {
        match self {
            NavOption::Demo(_) => TAG_DEMO,
            NavOption::Opaque { tag, .. } => *tag,
        }
    }
}

/// A decoded navdata datagram. The checksum option is implicit: it is
/// appended by [`build_navdata`] and verified by [`parse_navdata`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NavdataPacket {
    pub state_mask: u32,
    pub seq: u32,
    pub vision_flag: u32,
    pub options: Vec<NavOption>,
}

impl NavdataPacket {
    pub fn demo(&self) -> Option<&DemoData> {
        self.options.iter().find_map(|o| match o {
            NavOption::Demo(d) => Some(d),
            _ => None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("option {tag:#06x} payload of {len} bytes does not fit a 16-bit size")]
    OptionTooLarge { tag: u16, len: usize },
    #[error("the checksum option is appended automatically")]
    ExplicitChecksum,
}

pub fn build_navdata(packet: &NavdataPacket) -> Result<Vec<u8>, BuildError> {
    let mut out = Vec::with_capacity(NAVDATA_HEADER_LEN + 48);
    out.extend_from_slice(&NAVDATA_HEADER.to_le_bytes());
    out.extend_from_slice(&packet.state_mask.to_le_bytes());
    out.extend_from_slice(&packet.seq.to_le_bytes());
    out.extend_from_slice(&packet.vision_flag.to_le_bytes());
    for opt in &packet.options {
        match opt {
            NavOption::Demo(d) => {
                out.extend_from_slice(&TAG_DEMO.to_le_bytes());
                out.extend_from_slice(&((DEMO_PAYLOAD_LEN + 4) as u16).to_le_bytes());
                d.write(&mut out);
            }
            NavOption::Opaque { tag, payload } => {
                if *tag == TAG_CHECKSUM {
                    return Err(BuildError::ExplicitChecksum);
                }
                let size = u16::try_from(payload.len() + 4)
                    .map_err(|_| BuildError::OptionTooLarge { tag: *tag, len: payload.len() })?;
                out.extend_from_slice(&tag.to_le_bytes());
                out.extend_from_slice(&size.to_le_bytes());
                out.extend_from_slice(payload);
            }
        }
    }
    let sum = navdata_checksum(&out);
    out.extend_from_slice(&TAG_CHECKSUM.to_le_bytes());
    out.extend_from_slice(&(CHECKSUM_OPTION_LEN as u16).to_le_bytes());
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses and verifies a navdata datagram.
///
/// The checksum trailer is verified before anything else, so any single
/// corrupted byte surfaces as an integrity error.
pub fn parse_navdata(bytes: &[u8]) -> Result<NavdataPacket, NavdataError> {
    if bytes.len() < NAVDATA_HEADER_LEN + CHECKSUM_OPTION_LEN {
        return Err(NavdataError::Bounds("packet shorter than header and checksum"));
    }
    let trailer = bytes.len() - CHECKSUM_OPTION_LEN;
    if le_u16(bytes, trailer) != TAG_CHECKSUM
        || le_u16(bytes, trailer + 2) as usize != CHECKSUM_OPTION_LEN
    {
        return Err(NavdataError::MissingChecksum);
    }
    let stored = le_u32(bytes, trailer + 4);
    let computed = navdata_checksum(&bytes[..trailer]);
    if stored != computed {
        return Err(NavdataError::ChecksumMismatch { stored, computed });
    }

    let header = le_u32(bytes, 0);
    if header != NAVDATA_HEADER {
        return Err(NavdataError::NotNavdata(header));
    }
    let mut packet = NavdataPacket {
        state_mask: le_u32(bytes, 4),
        seq: le_u32(bytes, 8),
        vision_flag: le_u32(bytes, 12),
        options: Vec::new(),
    };

    let mut at = NAVDATA_HEADER_LEN;
    while at < trailer {
        if trailer - at < 4 {
            return Err(NavdataError::Bounds("truncated option header"));
        }
        let tag = le_u16(bytes, at);
        let size = le_u16(bytes, at + 2) as usize;
        if size < 4 {
            return Err(NavdataError::BadOption { tag, reason: "size below 4" });
        }
        if size > trailer - at {
            return Err(NavdataError::Bounds("option runs past end of packet"));
        }
        let payload = &bytes[at + 4..at + size];
        let opt = match tag {
            TAG_CHECKSUM => {
                return Err(NavdataError::BadOption { tag, reason: "checksum option not last" })
            }
            TAG_DEMO => {
                if payload.len() != DEMO_PAYLOAD_LEN {
                    return Err(NavdataError::BadOption { tag, reason: "demo payload size" });
                }
                NavOption::Demo(DemoData::read(payload))
            }
            _ => NavOption::Opaque { tag, payload: payload.to_vec() },
        };
        packet.options.push(opt);
        at += size;
    }
    Ok(packet)
}

// ---------------------------------------------------------------------------
// Video

pub const VIDEO_SIGNATURE: [u8; 4] = *b"PaVE";
/// Length of the fixed fields of a video frame header.
pub const VIDEO_HEADER_LEN: usize = 20;
/// Uncompressed RGB24 payload, used by the simulator.
pub const CODEC_RAW_RGB24: u8 = 0xFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VideoError {
    #[error("not a video frame: bad signature")]
    BadSignature,
    #[error("truncated video header: {0} bytes")]
    Truncated(usize),
    #[error("format error: {0}")]
    Format(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoFrameHeader {
    pub version: u8,
    pub codec: u8,
    pub header_size: u16,
    pub payload_size: u32,
    pub display_width: u16,
    pub display_height: u16,
    pub frame_number: u32,
}

impl VideoFrameHeader {
    /// Header for a raw RGB24 frame of the given size. Fails when the
    /// payload length does not fit the 32-bit size field.
    pub fn raw_rgb(width: u16, height: u16, frame_number: u32) -> Result<VideoFrameHeader, VideoError> {
        let payload = u64::from(width) * u64::from(height) * 3;
        let payload_size = u32::try_from(payload)
            .map_err(|_| VideoError::Format("raw RGB24 payload exceeds 32-bit size"))?;
        Ok(VideoFrameHeader {
            version: 1,
            codec: CODEC_RAW_RGB24,
            header_size: VIDEO_HEADER_LEN as u16,
            payload_size,
            display_width: width,
            display_height: height,
            frame_number,
        })
    }

    /// Serializes the fixed fields, zero-padding up to `header_size`.
    pub fn encode(&self) -> Vec<u8> {
        let len = (self.header_size as usize).max(VIDEO_HEADER_LEN);
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&VIDEO_SIGNATURE);
        out.push(self.version);
        out.push(self.codec);
        out.extend_from_slice(&self.header_size.to_le_bytes());
        out.extend_from_slice(&self.payload_size.to_le_bytes());
        out.extend_from_slice(&self.display_width.to_le_bytes());
        out.extend_from_slice(&self.display_height.to_le_bytes());
        out.extend_from_slice(&self.frame_number.to_le_bytes());
        out.resize(len, 0);
        out
    }
}

pub fn parse_video_header(bytes: &[u8]) -> Result<VideoFrameHeader, VideoError> {
    if bytes.len() < VIDEO_HEADER_LEN {
        return Err(VideoError::Truncated(bytes.len()));
    }
    if bytes[..4] != VIDEO_SIGNATURE {
        return Err(VideoError::BadSignature);
    }
    let header = VideoFrameHeader {
        version: bytes[4],
        codec: bytes[5],
        header_size: le_u16(bytes, 6),
        payload_size: le_u32(bytes, 8),
        display_width: le_u16(bytes, 12),
        display_height: le_u16(bytes, 14),
        frame_number: le_u32(bytes, 16),
    };
    if (header.header_size as usize) < VIDEO_HEADER_LEN {
        return Err(VideoError::Format("header_size below fixed-field length"));
    }
    if header.codec == CODEC_RAW_RGB24 {
        let expected = u64::from(header.display_width) * u64::from(header.display_height) * 3;
        if u64::from(header.payload_size) != expected {
            return Err(VideoError::Format("payload_size does not match raw RGB24 dimensions"));
        }
    }
    Ok(header)
}
