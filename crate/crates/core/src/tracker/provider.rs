//! Posteriorgram sources for the online phase, including the PPGSTREAM wire
//! protocol:
//!
//! ```text
//! -> HELLO PPGSTREAM 1 <set>\n            <- HELLO PPGSTREAM 1 <set>\n
//! -> CHUNK <n>\n + n x f32 LE samples     <- ROWS <r> <d>\n + r*d x f32 LE
//! ```
//!
//! Each `ROWS` reply carries the posteriors of all frames completed so far
//! that were not sent before, in frame order.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;

use crate::ppg::{PhonemeSet, PhonemeSetName, PpgMatrix};

use super::stream::ready_frames;
use super::TrackError;

pub const PROTOCOL_VERSION: u32 = 1;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

pub trait PpgProvider: Send {
    fn set(&self) -> PhonemeSetName;

    /// Hands over target audio before the frames it completes are requested.
    fn push_audio(&mut self, samples: &[f32]) -> Result<(), TrackError>;

    /// Posterior row of frame `k`, or `None` if it did not arrive by
    /// `deadline`. Frames are requested in increasing order.
    fn row(&mut self, k: usize, deadline: Instant) -> Result<Option<Vec<f64>>, TrackError>;

    /// Number of frames available, when known in advance.
    fn frames(&self) -> Option<usize> {
        None
    }
}

/// Precomputed posteriors indexed by frame.
#[derive(Debug, Clone)]
pub struct FilePpgProvider {
    ppg: PpgMatrix,
}

impl FilePpgProvider {
    pub fn new(ppg: PpgMatrix) -> Self {
        Self { ppg }
    }
}

impl PpgProvider for FilePpgProvider {
    fn set(&self) -> PhonemeSetName {
        self.ppg.set().name()
    }

    fn push_audio(&mut self, _samples: &[f32]) -> Result<(), TrackError> {
        Ok(())
    }

    fn row(&mut self, k: usize, _deadline: Instant) -> Result<Option<Vec<f64>>, TrackError> {
        if k >= self.ppg.frames() {
            return Err(TrackError::ClockMismatch {
                expected: k + 1,
                got: self.ppg.frames(),
            });
        }
        Ok(Some(self.ppg.row(k).to_vec()))
    }

    fn frames(&self) -> Option<usize> {
        Some(self.ppg.frames())
    }
}

fn hello(set: PhonemeSetName) -> String {
    format!("HELLO PPGSTREAM {PROTOCOL_VERSION} {set}\n")
}

fn protocol(msg: impl Into<String>) -> TrackError {
    TrackError::Provider(msg.into())
}

fn read_header<R: BufRead>(r: &mut R) -> io::Result<Option<String>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim_end_matches(['\n', '\r']).to_string()))
}

/// Reads one `ROWS` message; `Ok(None)` on a clean end of stream.
pub fn read_rows<R: BufRead>(r: &mut R, dims: usize) -> Result<Option<Vec<Vec<f64>>>, TrackError> {
    let Some(line) = read_header(r)? else {
        return Ok(None);
    };
    let parts: Vec<&str> = line.split_whitespace().collect();
    let (n, d) = match parts.as_slice() {
        ["ROWS", n, d] => (
            n.parse::<usize>().map_err(|_| protocol(format!("bad row count in `{line}`")))?,
            d.parse::<usize>().map_err(|_| protocol(format!("bad dims in `{line}`")))?,
        ),
        ["ERR", ..] => return Err(protocol(format!("server error: {line}"))),
        _ => return Err(protocol(format!("expected ROWS header, got `{line}`"))),
    };
    if d != dims && n > 0 {
        return Err(protocol(format!("server sent {d}-dim rows, expected {dims}")));
    }
    let mut buf = vec![0u8; n * d * 4];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Some(vals.chunks_exact(d.max(1)).map(<[f64]>::to_vec).collect()))
}

pub fn write_rows<W: Write>(w: &mut W, rows: &[&[f64]], dims: usize) -> io::Result<()> {
    let mut buf = format!("ROWS {} {dims}\n", rows.len()).into_bytes();
    for r in rows {
        for &v in *r {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn write_chunk<W: Write>(w: &mut W, samples: &[f32]) -> io::Result<()> {
    let mut buf = format!("CHUNK {}\n", samples.len()).into_bytes();
    for s in samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one `CHUNK` message; `Ok(None)` on a clean end of stream.
pub fn read_chunk<R: BufRead>(r: &mut R) -> Result<Option<Vec<f32>>, TrackError> {
    let Some(line) = read_header(r)? else {
        return Ok(None);
    };
    let n = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["CHUNK", n] => n
            .parse::<usize>()
            .map_err(|_| protocol(format!("bad sample count in `{line}`")))?,
        _ => return Err(protocol(format!("expected CHUNK header, got `{line}`"))),
    };
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(Some(
        buf.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    ))
}

enum Incoming {
    Hello(String),
    Rows(Vec<Vec<f64>>),
    Failed(String),
}

/// Posteriors from an external acoustic model over PPGSTREAM.
pub struct StreamPpgProvider {
    set: PhonemeSetName,
    writer: Option<Box<dyn Write + Send>>,
    rx: Receiver<Incoming>,
    buffered: VecDeque<Vec<f64>>,
    /// Frame index of `buffered[0]`.
    base: usize,
    child: Option<Child>,
    socket: Option<TcpStream>,
    reader: Option<JoinHandle<()>>,
    alive: bool,
}

impl StreamPpgProvider {
    /// Runs `cmdline` (whitespace-separated program and arguments) and talks
    /// to it over stdin/stdout.
    pub fn spawn(cmdline: &str, set: PhonemeSetName) -> Result<Self, TrackError> {
        let mut parts = cmdline.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| TrackError::Config("empty provider command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut p = Self::from_streams(stdout, stdin, set)?;
        p.child = Some(child);
        Ok(p)
    }

    pub fn connect(addr: &str, set: PhonemeSetName) -> Result<Self, TrackError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let control = stream.try_clone()?;
        let mut p = Self::from_streams(reader, stream, set)?;
        p.socket = Some(control);
        Ok(p)
    }

    pub fn from_streams<R, W>(reader: R, mut writer: W, set: PhonemeSetName) -> Result<Self, TrackError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let dims = PhonemeSet::new(set).len();
        writer.write_all(hello(set).as_bytes())?;
        writer.flush()?;
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::Builder::new()
            .name("ppgstream-reader".into())
            .spawn(move || {
                let mut r = BufReader::new(reader);
                match read_header(&mut r) {
                    Ok(Some(line)) => {
                        if tx.send(Incoming::Hello(line)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Incoming::Failed("closed before handshake".into()));
                        return;
                    }
                    Err(e) => {
                        let _ = tx.send(Incoming::Failed(e.to_string()));
                        return;
                    }
                }
                loop {
                    let msg = match read_rows(&mut r, dims) {
                        Ok(Some(rows)) => Incoming::Rows(rows),
                        Ok(None) => return,
                        Err(e) => Incoming::Failed(e.to_string()),
                    };
                    let stop = matches!(msg, Incoming::Failed(_));
                    if tx.send(msg).is_err() || stop {
                        return;
                    }
                }
            })?;
        let p = Self {
            set,
            writer: Some(Box::new(writer)),
            rx,
            buffered: VecDeque::new(),
            base: 0,
            child: None,
            socket: None,
            reader: Some(reader),
            alive: true,
        };
        match p.rx.recv_timeout(HANDSHAKE_TIMEOUT) {
            Ok(Incoming::Hello(line)) if line == hello(set).trim_end() => Ok(p),
            Ok(Incoming::Hello(line)) => Err(protocol(format!("handshake refused: `{line}`"))),
            Ok(Incoming::Failed(e)) => Err(protocol(e)),
            Ok(Incoming::Rows(_)) => Err(protocol("rows before handshake")),
            Err(_) => Err(protocol("no handshake reply")),
        }
    }

    fn mark_dead(&mut self, why: &str) {
        if self.alive {
            warn!("posterior stream lost ({why}); continuing on chroma");
            self.alive = false;
        }
    }

    fn absorb(&mut self, msg: Incoming) {
        match msg {
            Incoming::Rows(rows) => self.buffered.extend(rows),
            Incoming::Failed(e) => self.mark_dead(&e),
            Incoming::Hello(_) => self.mark_dead("unexpected second handshake"),
        }
    }
}

impl PpgProvider for StreamPpgProvider {
    fn set(&self) -> PhonemeSetName {
        self.set
    }

    fn push_audio(&mut self, samples: &[f32]) -> Result<(), TrackError> {
        if !self.alive {
            return Ok(());
        }
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = write_chunk(w, samples) {
                self.mark_dead(&e.to_string());
            }
        }
        Ok(())
    }

    fn row(&mut self, k: usize, deadline: Instant) -> Result<Option<Vec<f64>>, TrackError> {
        loop {
            while k > self.base && !self.buffered.is_empty() {
                self.buffered.pop_front();
                self.base += 1;
            }
            if k == self.base {
                if let Some(r) = self.buffered.pop_front() {
                    self.base += 1;
                    return Ok(Some(r));
                }
            }
            if !self.alive {
                return Ok(None);
            }
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(msg) => self.absorb(msg),
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    self.mark_dead("stream closed");
                    return Ok(None);
                }
            }
        }
    }
}

impl Drop for StreamPpgProvider {
    fn drop(&mut self) {
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_millis(500);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        if let Some(s) = self.socket.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        // the reader thread ends on its own once the peer's output closes
        self.reader.take();
    }
}

/// Serves precomputed posteriors over PPGSTREAM: after each chunk, replies
/// with the rows of all frames that chunk completed. Ends cleanly when the
/// client closes.
pub fn serve_replay<R: Read, W: Write>(ppg: &PpgMatrix, reader: R, mut writer: W) -> Result<(), TrackError> {
    let mut r = BufReader::new(reader);
    let set = ppg.set().name();
    match read_header(&mut r)? {
        Some(line) if line == hello(set).trim_end() => {
            writer.write_all(hello(set).as_bytes())?;
            writer.flush()?;
        }
        Some(line) => {
            writer.write_all(format!("ERR handshake mismatch, serving {set}\n").as_bytes())?;
            writer.flush()?;
            return Err(protocol(format!("handshake refused: `{line}`")));
        }
        None => return Ok(()),
    }
    let mut total = 0usize;
    let mut sent = 0usize;
    while let Some(chunk) = read_chunk(&mut r)? {
        total += chunk.len();
        let ready = ready_frames(total).min(ppg.frames());
        let rows: Vec<&[f64]> = (sent..ready).map(|k| ppg.row(k)).collect();
        write_rows(&mut writer, &rows, ppg.set().len())?;
        sent = ready;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppg::synthetic_ppg;
    use std::net::TcpListener;

    fn ppg(frames: usize) -> PpgMatrix {
        let set = PhonemeSet::new(PhonemeSetName::Phoneme5);
        let labels: Vec<&str> = (0..frames)
            .map(|k| set.labels()[k % 5].as_str())
            .collect();
        synthetic_ppg(&labels, &set, 0.8).unwrap()
    }

    #[test]
    fn message_round_trips() {
        let mut buf = Vec::new();
        write_chunk(&mut buf, &[0.5, -0.25]).unwrap();
        assert!(buf.starts_with(b"CHUNK 2\n"));
        assert_eq!(buf.len(), 8 + 8);
        let got = read_chunk(&mut &buf[..]).unwrap().unwrap();
        assert_eq!(got, vec![0.5, -0.25]);

        let mut buf = Vec::new();
        write_rows(&mut buf, &[&[0.25, 0.75], &[1.0, 0.0]], 2).unwrap();
        assert!(buf.starts_with(b"ROWS 2 2\n"));
        assert_eq!(&buf[9..13], &0.25f32.to_le_bytes());
        let rows = read_rows(&mut &buf[..], 2).unwrap().unwrap();
        assert_eq!(rows, vec![vec![0.25, 0.75], vec![1.0, 0.0]]);
        assert!(read_rows(&mut &buf[..], 3).is_err());
        assert!(read_rows(&mut &b"NOPE\n"[..], 2).is_err());
        assert!(read_rows(&mut &b""[..], 2).unwrap().is_none());
    }

    #[test]
    fn file_provider_bounds() {
        let mut p = FilePpgProvider::new(ppg(3));
        let now = Instant::now();
        assert_eq!(p.row(2, now).unwrap().unwrap().len(), 5);
        assert!(matches!(p.row(3, now), Err(TrackError::ClockMismatch { .. })));
        assert_eq!(p.frames(), Some(3));
    }

    #[test]
    fn tcp_stream_replays_rows() {
        let m = ppg(40);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let served = m.clone();
        let server = std::thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            let r = sock.try_clone().unwrap();
            serve_replay(&served, r, sock).unwrap();
        });
        let mut p = StreamPpgProvider::connect(&addr, PhonemeSetName::Phoneme5).unwrap();
        let mut got = Vec::new();
        let mut pushed = 0;
        for chunk in vec![vec![0.0f32; 2560]; 9] {
            p.push_audio(&chunk).unwrap();
            pushed += chunk.len();
            let ready = ready_frames(pushed).min(40);
            while got.len() < ready {
                let deadline = Instant::now() + Duration::from_secs(5);
                got.push(p.row(got.len(), deadline).unwrap().unwrap());
            }
        }
        assert_eq!(got.len(), 36);
        for (k, row) in got.iter().enumerate() {
            let want: Vec<f64> = m.row(k).iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(row, &want);
        }
        // nothing more is coming for a frame that needs unseen audio
        let short = Instant::now() + Duration::from_millis(50);
        assert!(p.row(37, short).unwrap().is_none());
        drop(p);
        server.join().unwrap();
    }

    #[test]
    fn handshake_mismatch_refused() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let m = ppg(4);
        let server = std::thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            let r = sock.try_clone().unwrap();
            assert!(serve_replay(&m, r, sock).is_err());
        });
        assert!(StreamPpgProvider::connect(&addr, PhonemeSetName::Viseme14).is_err());
        server.join().unwrap();
    }

    #[test]
    fn late_rows_are_skipped() {
        let (client_r, server_w) = pipe_pair();
        let (server_r, client_w) = pipe_pair();
        let m = ppg(20);
        let served = m.clone();
        let server = std::thread::spawn(move || serve_replay(&served, server_r, server_w));
        let mut p = StreamPpgProvider::from_streams(client_r, client_w, PhonemeSetName::Phoneme5).unwrap();
        p.push_audio(&[0.0; 2560]).unwrap();
        // frames 0..3 are ready; ask for 2 directly as if 0 and 1 stalled
        let deadline = Instant::now() + Duration::from_secs(5);
        let r2 = p.row(2, deadline).unwrap().unwrap();
        let want: Vec<f64> = m.row(2).iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(r2, want);
        drop(p);
        server.join().unwrap().unwrap();
    }

    /// In-memory unidirectional byte pipe.
    fn pipe_pair() -> (PipeReader, PipeWriter) {
        let (tx, rx) = mpsc::channel();
        (
            PipeReader {
                rx,
                buf: VecDeque::new(),
            },
            PipeWriter { tx },
        )
    }

    struct PipeReader {
        rx: Receiver<Vec<u8>>,
        buf: VecDeque<u8>,
    }

    struct PipeWriter {
        tx: mpsc::Sender<Vec<u8>>,
    }

    impl Read for PipeReader {
        fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
            while self.buf.is_empty() {
                match self.rx.recv() {
                    Ok(v) => self.buf.extend(v),
                    Err(_) => return Ok(0),
                }
            }
            let n = out.len().min(self.buf.len());
            for (o, b) in out.iter_mut().zip(self.buf.drain(..n)) {
                *o = b;
            }
            Ok(n)
        }
    }

    impl Write for PipeWriter {
        fn write(&mut self, data: &[u8]) -> io::Result<usize> {
            self.tx
                .send(data.to_vec())
                .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
            Ok(data.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
}
