use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use log::warn;
use roxmltree::{Document, Node};

use super::{ScoreError, Syllabic, VocalNote};
use crate::audio::ScoreNote;
use crate::timeline::TempoMap;

const DEFAULT_BPM: f64 = 120.0;

/// Everything the offline phase needs from a score.
#[derive(Debug, Clone)]
pub struct ParsedScore {
    pub vocal: Vec<VocalNote>,
    pub accomp: Vec<ScoreNote>,
    pub tempo: TempoMap,
    pub vocal_part: String,
}

impl ParsedScore {
    /// Vocal and accompaniment notes together, for synthesis.
    pub fn all_notes(&self) -> Vec<ScoreNote> {
        self.vocal
            .iter()
            .map(|n| ScoreNote {
                onset: n.onset,
                duration: n.duration,
                pitch: n.pitch,
            })
            .chain(self.accomp.iter().copied())
            .collect()
    }
}

fn read_document_text(path: &Path) -> Result<String, ScoreError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    if ext.as_deref() != Some("mxl") {
        return Ok(std::fs::read_to_string(path)?);
    }
    let file = std::fs::File::open(path)?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| ScoreError::Xml(e.to_string()))?;
    let mut rootfile = None;
    if let Ok(mut container) = zip.by_name("META-INF/container.xml") {
        let mut text = String::new();
        container.read_to_string(&mut text)?;
        let doc = Document::parse(&text).map_err(|e| ScoreError::Xml(e.to_string()))?;
        rootfile = doc
            .descendants()
            .find(|n| n.has_tag_name("rootfile"))
            .and_then(|n| n.attribute("full-path"))
            .map(str::to_string);
    }
    let name = match rootfile {
        Some(r) => r,
        None => (0..zip.len())
            .filter_map(|i| zip.name_for_index(i).map(str::to_string))
            .find(|n| !n.starts_with("META-INF") && (n.ends_with(".xml") || n.ends_with(".musicxml")))
            .ok_or_else(|| ScoreError::Xml("no score document in archive".into()))?,
    };
    let mut text = String::new();
    zip.by_name(&name)
        .map_err(|e| ScoreError::Xml(e.to_string()))?
        .read_to_string(&mut text)?;
    Ok(text)
}

pub fn parse_musicxml(path: &Path, part_hint: Option<&str>) -> Result<ParsedScore, ScoreError> {
    let text = read_document_text(path)?;
    parse_musicxml_str(&text, part_hint)
}

#[derive(Debug, Default)]
struct PartNotes {
    notes: Vec<RawNote>,
    lyric_count: usize,
}

#[derive(Debug, Clone)]
struct RawNote {
    onset: f64,
    duration: f64,
    pitch: u8,
    lyric: Option<(Syllabic, String)>,
}

fn child<'a>(n: Node<'a, 'a>, name: &str) -> Option<Node<'a, 'a>> {
    n.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(n: Node<'a, 'a>, name: &str) -> Option<&'a str> {
    child(n, name).and_then(|c| c.text()).map(str::trim)
}

fn parse_num(s: Option<&str>, what: &str, loc: &str) -> Result<f64, ScoreError> {
    s.and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| ScoreError::Xml(format!("{loc}: missing or invalid {what}")))
}

fn midi_pitch(pitch: Node, loc: &str) -> Result<u8, ScoreError> {
    let step = child_text(pitch, "step").unwrap_or("");
    let base = match step {
        "C" => 0,
        "D" => 2,
        "E" => 4,
        "F" => 5,
        "G" => 7,
        "A" => 9,
        "B" => 11,
        other => return Err(ScoreError::Xml(format!("{loc}: bad step `{other}`"))),
    };
    let alter = child_text(pitch, "alter")
        .map(|a| a.parse::<f64>())
        .transpose()
        .map_err(|_| ScoreError::Xml(format!("{loc}: bad alter")))?
        .unwrap_or(0.0);
    if alter.fract() != 0.0 {
        return Err(ScoreError::Unsupported {
            what: "microtonal alter".into(),
            location: loc.into(),
        });
    }
    let octave = parse_num(child_text(pitch, "octave"), "octave", loc)?;
    let midi = (octave + 1.0) * 12.0 + base as f64 + alter;
    if !(0.0..=127.0).contains(&midi) {
        return Err(ScoreError::Xml(format!("{loc}: pitch out of MIDI range")));
    }
    Ok(midi as u8)
}

pub fn parse_musicxml_str(text: &str, part_hint: Option<&str>) -> Result<ParsedScore, ScoreError> {
    let doc = Document::parse(text).map_err(|e| ScoreError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if root.has_tag_name("score-timewise") {
        return Err(ScoreError::Unsupported {
            what: "timewise document".into(),
            location: "score-timewise".into(),
        });
    }
    if !root.has_tag_name("score-partwise") {
        return Err(ScoreError::Xml(format!(
            "root element is `{}`, expected score-partwise",
            root.tag_name().name()
        )));
    }
    let mut part_names: HashMap<String, String> = HashMap::new();
    if let Some(list) = child(root, "part-list") {
        for sp in list.children().filter(|c| c.has_tag_name("score-part")) {
            if let Some(id) = sp.attribute("id") {
                let name = child_text(sp, "part-name").unwrap_or(id).to_string();
                part_names.insert(id.to_string(), name);
            }
        }
    }

    let mut parts: Vec<(String, PartNotes)> = Vec::new();
    let mut tempo_marks: Vec<(f64, f64)> = Vec::new();
    for part in root.children().filter(|c| c.has_tag_name("part")) {
        let id = part.attribute("id").unwrap_or("").to_string();
        let notes = parse_part(part, &id, &mut tempo_marks)?;
        parts.push((id, notes));
    }
    if parts.is_empty() {
        return Err(ScoreError::NoVocalPart);
    }

    let vocal_idx = match part_hint {
        Some(hint) => parts
            .iter()
            .position(|(id, _)| {
                id.eq_ignore_ascii_case(hint)
                    || part_names
                        .get(id)
                        .is_some_and(|n| n.eq_ignore_ascii_case(hint))
            })
            .ok_or(ScoreError::NoVocalPart)?,
        None => {
            let (idx, best) = parts
                .iter()
                .enumerate()
                .max_by_key(|(i, (_, p))| (p.lyric_count, std::cmp::Reverse(*i)))
                .expect("non-empty");
            if best.1.lyric_count == 0 {
                return Err(ScoreError::NoVocalPart);
            }
            idx
        }
    };

    tempo_marks.sort_by(|a, b| a.0.total_cmp(&b.0));
    tempo_marks.dedup_by(|a, b| a.0 == b.0);
    let mut changes = tempo_marks;
    match changes.first() {
        None => {
            warn!("score has no tempo marking, assuming {DEFAULT_BPM} bpm");
            changes.push((0.0, DEFAULT_BPM));
        }
        Some(&(b, bpm)) if b > 0.0 => changes.insert(0, (0.0, bpm)),
        _ => {}
    }
    let tempo = TempoMap::from_changes(&changes)?;

    let mut vocal = Vec::new();
    let mut accomp = Vec::new();
    for (i, (_, p)) in parts.iter().enumerate() {
        for n in &p.notes {
            if i == vocal_idx {
                let (syllabic, syllable) = n
                    .lyric
                    .clone()
                    .unwrap_or((Syllabic::Middle, String::new()));
                vocal.push(VocalNote {
                    onset: n.onset,
                    duration: n.duration,
                    pitch: n.pitch,
                    syllable,
                    syllabic,
                });
            } else {
                accomp.push(ScoreNote {
                    onset: n.onset,
                    duration: n.duration,
                    pitch: n.pitch,
                });
            }
        }
    }
    vocal.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    accomp.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    let vocal_id = &parts[vocal_idx].0;
    Ok(ParsedScore {
        vocal,
        accomp,
        tempo,
        vocal_part: part_names.get(vocal_id).cloned().unwrap_or(vocal_id.clone()),
    })
}

fn parse_part(part: Node, id: &str, tempo_marks: &mut Vec<(f64, f64)>) -> Result<PartNotes, ScoreError> {
    let mut out = PartNotes::default();
    let mut divisions = 1.0f64;
    let mut cursor = 0.0f64;
    let mut last_onset = 0.0f64;
    // pitch -> index of note awaiting a tie stop
    let mut open_ties: HashMap<u8, usize> = HashMap::new();

    for measure in part.children().filter(|c| c.has_tag_name("measure")) {
        let mnum = measure.attribute("number").unwrap_or("?");
        let loc = format!("part {id}, measure {mnum}");
        for el in measure.children().filter(|c| c.is_element()) {
            match el.tag_name().name() {
                "attributes" => {
                    if let Some(d) = child_text(el, "divisions") {
                        divisions = parse_num(Some(d), "divisions", &loc)?;
                        if divisions <= 0.0 {
                            return Err(ScoreError::Xml(format!("{loc}: divisions must be positive")));
                        }
                    }
                }
                "backup" => {
                    cursor -= parse_num(child_text(el, "duration"), "backup duration", &loc)? / divisions;
                    if cursor < -1e-9 {
                        return Err(ScoreError::Xml(format!("{loc}: backup before score start")));
                    }
                }
                "forward" => {
                    cursor += parse_num(child_text(el, "duration"), "forward duration", &loc)? / divisions;
                }
                "sound" => {
                    if let Some(t) = el.attribute("tempo") {
                        tempo_marks.push((cursor, parse_num(Some(t), "tempo", &loc)?));
                    }
                }
                "direction" => {
                    for s in el.descendants().filter(|c| c.has_tag_name("sound")) {
                        if let Some(t) = s.attribute("tempo") {
                            tempo_marks.push((cursor, parse_num(Some(t), "tempo", &loc)?));
                        }
                    }
                }
                "barline" => {
                    if child(el, "repeat").is_some() || child(el, "ending").is_some() {
                        return Err(ScoreError::Unsupported {
                            what: "repeat/volta barline".into(),
                            location: loc,
                        });
                    }
                }
                "note" => {
                    if child(el, "grace").is_some() {
                        warn!("{loc}: grace note ignored");
                        continue;
                    }
                    let is_chord = child(el, "chord").is_some();
                    let dur = parse_num(child_text(el, "duration"), "note duration", &loc)? / divisions;
                    let onset = if is_chord { last_onset } else { cursor };
                    if !is_chord {
                        cursor += dur;
                        last_onset = onset;
                    }
                    if child(el, "rest").is_some() {
                        continue;
                    }
                    let Some(pitch_el) = child(el, "pitch") else {
                        return Err(ScoreError::Unsupported {
                            what: "unpitched note".into(),
                            location: loc,
                        });
                    };
                    let pitch = midi_pitch(pitch_el, &loc)?;
                    let ties: Vec<&str> = el
                        .children()
                        .filter(|c| c.has_tag_name("tie"))
                        .filter_map(|c| c.attribute("type"))
                        .collect();
                    let tie_start = ties.contains(&"start");
                    let tie_stop = ties.contains(&"stop");
                    if tie_stop {
                        if let Some(&idx) = open_ties.get(&pitch) {
                            out.notes[idx].duration = onset + dur - out.notes[idx].onset;
                            if !tie_start {
                                open_ties.remove(&pitch);
                            }
                            continue;
                        }
                        warn!("{loc}: tie stop without start");
                    }
                    let mut lyric = None;
                    for l in el.children().filter(|c| c.has_tag_name("lyric")) {
                        let number = l.attribute("number").unwrap_or("1");
                        if number != "1" {
                            warn!("{loc}: lyric verse {number} ignored");
                            continue;
                        }
                        let syllabic = match child_text(l, "syllabic").unwrap_or("single") {
                            "single" => Syllabic::Single,
                            "begin" => Syllabic::Begin,
                            "middle" => Syllabic::Middle,
                            "end" => Syllabic::End,
                            other => {
                                return Err(ScoreError::Xml(format!("{loc}: syllabic `{other}`")))
                            }
                        };
                        let text: String = l
                            .children()
                            .filter(|c| c.has_tag_name("text"))
                            .filter_map(|c| c.text())
                            .collect();
                        if !text.trim().is_empty() {
                            lyric = Some((syllabic, text.trim().to_string()));
                        }
                    }
                    if lyric.is_some() {
                        out.lyric_count += 1;
                    }
                    if tie_start {
                        open_ties.insert(pitch, out.notes.len());
                    }
                    out.notes.push(RawNote {
                        onset,
                        duration: dur,
                        pitch,
                        lyric,
                    });
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

fn pitch_xml(pitch: u8) -> String {
    const STEPS: [(&str, i32); 12] = [
        ("C", 0),
        ("C", 1),
        ("D", 0),
        ("D", 1),
        ("E", 0),
        ("F", 0),
        ("F", 1),
        ("G", 0),
        ("G", 1),
        ("A", 0),
        ("A", 1),
        ("B", 0),
    ];
    let (step, alter) = STEPS[(pitch % 12) as usize];
    let octave = pitch as i32 / 12 - 1;
    let alter = if alter != 0 {
        format!("<alter>{alter}</alter>")
    } else {
        String::new()
    };
    format!("<pitch><step>{step}</step>{alter}<octave>{octave}</octave></pitch>")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Minimal partwise writer: one long measure per part, positions set with
/// `<forward>`/`<backup>`. Onsets and durations are rounded to `divisions`.
pub fn write_musicxml(
    vocal: &[VocalNote],
    accomp: &[ScoreNote],
    tempo_changes: &[(f64, f64)],
    divisions: u32,
) -> String {
    let div = divisions as f64;
    let ticks = |beats: f64| (beats * div).round() as i64;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<score-partwise version=\"3.1\">\n");
    s.push_str("  <part-list>\n    <score-part id=\"P1\"><part-name>Voice</part-name></score-part>\n");
    if !accomp.is_empty() {
        s.push_str("    <score-part id=\"P2\"><part-name>Piano</part-name></score-part>\n");
    }
    s.push_str("  </part-list>\n");

    let mut write_part = |id: &str, notes: Vec<(f64, f64, u8, Option<(Syllabic, &str)>)>, tempo: bool| {
        let _ = writeln!(s, "  <part id=\"{id}\">\n    <measure number=\"1\">");
        let _ = writeln!(
            s,
            "      <attributes><divisions>{divisions}</divisions></attributes>"
        );
        let mut cursor = 0i64;
        let mut events: Vec<(i64, String)> = Vec::new();
        if tempo {
            for &(beat, bpm) in tempo_changes {
                events.push((ticks(beat), format!("<sound tempo=\"{bpm}\"/>")));
            }
        }
        for (onset, dur, pitch, lyric) in notes {
            let lyric_xml = lyric
                .map(|(syl, text)| {
                    let syl = match syl {
                        Syllabic::Single => "single",
                        Syllabic::Begin => "begin",
                        Syllabic::Middle => "middle",
                        Syllabic::End => "end",
                    };
                    format!(
                        "<lyric number=\"1\"><syllabic>{syl}</syllabic><text>{}</text></lyric>",
                        escape(text)
                    )
                })
                .unwrap_or_default();
            events.push((
                ticks(onset),
                format!(
                    "<note>{}<duration>{}</duration>{lyric_xml}</note>",
                    pitch_xml(pitch),
                    ticks(onset + dur) - ticks(onset)
                ),
            ));
        }
        events.sort_by_key(|e| e.0);
        for (at, xml) in events {
            if at > cursor {
                let _ = writeln!(s, "      <forward><duration>{}</duration></forward>", at - cursor);
            } else if at < cursor {
                let _ = writeln!(s, "      <backup><duration>{}</duration></backup>", cursor - at);
            }
            cursor = at;
            let _ = writeln!(s, "      {xml}");
            if let Some(d) = xml
                .split("<duration>")
                .nth(1)
                .and_then(|r| r.split('<').next())
                .and_then(|d| d.parse::<i64>().ok())
            {
                cursor += d;
            }
        }
        s.push_str("    </measure>\n  </part>\n");
    };
    write_part(
        "P1",
        vocal
            .iter()
            .map(|n| {
                let lyric = (!n.syllable.is_empty()).then_some((n.syllabic, n.syllable.as_str()));
                (n.onset, n.duration, n.pitch, lyric)
            })
            .collect(),
        true,
    );
    if !accomp.is_empty() {
        write_part(
            "P2",
            accomp
                .iter()
                .map(|n| (n.onset, n.duration, n.pitch, None))
                .collect(),
            false,
        );
    }
    s.push_str("</score-partwise>\n");
    s
}
