//! MusicXML (partwise) reader, including compressed `.mxl` archives.

use std::collections::BTreeSet;
use std::io::{Cursor, Read};

use roxmltree::{Document, Node};

use crate::score::{
    merge_ties, unroll_repeats, BarMarks, Duration, Fraction, KeySignature, Measure, Mode, NoteEvent, Pitch, Score,
    Step, TimeSignature,
};

use super::FormatError;

/// A parsed document plus the constructs that were skipped.
#[derive(Debug, Clone)]
pub struct MusicXmlParse {
    pub score: Score,
    pub warnings: Vec<String>,
}

pub fn parse_musicxml(text: &str) -> Result<Score, FormatError> {
    parse_musicxml_detailed(text).map(|p| p.score)
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(node: Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|c| c.text()).map(str::trim)
}

fn parse_num<T: std::str::FromStr>(node: Node<'_, '_>, name: &str) -> Option<T> {
    child_text(node, name).and_then(|t| t.parse().ok())
}

/// One notated measure of one part, before repeats are expanded.
struct PartMeasure {
    time_signature: TimeSignature,
    key: KeySignature,
    marks: BarMarks,
    implicit: bool,
    events: Vec<NoteEvent>,
}

#[derive(Default)]
struct Warnings {
    ignored: BTreeSet<String>,
    other: Vec<String>,
}

const IGNORED: [&str; 6] = ["direction", "harmony", "figured-bass", "print", "sound", "listening"];

struct PartReader<'w> {
    id: String,
    divisions: i64,
    time_signature: TimeSignature,
    key: KeySignature,
    /// Voice number seen first in this part; it keeps the plain part id.
    primary_voice: Option<String>,
    voices: Vec<String>,
    warnings: &'w mut Warnings,
}

impl PartReader<'_> {
    fn voice_id(&mut self, xml_voice: Option<&str>) -> String {
        let v = xml_voice.unwrap_or("1").to_string();
        let primary = self.primary_voice.get_or_insert_with(|| v.clone());
        let id = if *primary == v { self.id.clone() } else { format!("{}.{}", self.id, v) };
        if !self.voices.contains(&id) {
            self.voices.push(id.clone());
        }
        id
    }

    fn whole(&self, divs: i64) -> Fraction {
        Fraction::new(divs, 4 * self.divisions)
    }

    fn attributes(&mut self, node: Node<'_, '_>) -> Result<(), FormatError> {
        if let Some(d) = parse_num::<i64>(node, "divisions") {
            if d <= 0 {
                return Err(FormatError::InvalidMusicXml(format!("part {}: divisions must be positive", self.id)));
            }
            self.divisions = d;
        }
        if let Some(key) = child(node, "key") {
            let fifths = parse_num::<i32>(key, "fifths").unwrap_or(0);
            let mode = match child_text(key, "mode").unwrap_or("major") {
                "minor" | "aeolian" => Mode::Minor,
                "dorian" => Mode::Dorian,
                "phrygian" => Mode::Phrygian,
                "lydian" => Mode::Lydian,
                "mixolydian" => Mode::Mixolydian,
                "locrian" => Mode::Locrian,
                _ => Mode::Major,
            };
            self.key = KeySignature::new(fifths, mode);
        }
        if let Some(time) = child(node, "time") {
            let beats = child_text(time, "beats").unwrap_or("4");
            let beat_type = child_text(time, "beat-type").unwrap_or("4");
            let meter: TimeSignature = format!("{beats}/{beat_type}")
                .parse()
                .map_err(|_| FormatError::InvalidMusicXml(format!("part {}: bad time {beats}/{beat_type}", self.id)))?;
            self.time_signature = meter;
        }
        Ok(())
    }

    fn pitch(&mut self, note: Node<'_, '_>) -> Result<Pitch, FormatError> {
        let pitch = child(note, "pitch")
            .ok_or_else(|| FormatError::InvalidMusicXml(format!("part {}: note without pitch", self.id)))?;
        let step = child_text(pitch, "step")
            .and_then(|s| s.chars().next())
            .and_then(Step::from_letter)
            .ok_or_else(|| FormatError::InvalidMusicXml(format!("part {}: bad step", self.id)))?;
        let alter = child_text(pitch, "alter").and_then(|a| a.parse::<f64>().ok()).unwrap_or(0.0);
        if alter.fract() != 0.0 {
            self.warnings.other.push(format!("part {}: microtonal alter {alter} rounded", self.id));
        }
        let octave = parse_num::<i8>(pitch, "octave")
            .ok_or_else(|| FormatError::InvalidMusicXml(format!("part {}: bad octave", self.id)))?;
        Ok(Pitch::new(step, alter.round() as i8, octave))
    }

    fn measure(&mut self, node: Node<'_, '_>, index: usize) -> Result<PartMeasure, FormatError> {
        let mut events: Vec<NoteEvent> = Vec::new();
        let mut marks = BarMarks::default();
        let mut cursor: i64 = 0;
        let mut last_onset: i64 = 0;
        for el in node.children().filter(Node::is_element) {
            match el.tag_name().name() {
                "attributes" => self.attributes(el)?,
                "backup" => cursor -= parse_num::<i64>(el, "duration").unwrap_or(0),
                "forward" => cursor += parse_num::<i64>(el, "duration").unwrap_or(0),
                "barline" => {
                    if let Some(rep) = child(el, "repeat") {
                        match rep.attribute("direction") {
                            Some("forward") => marks.repeat_start = true,
                            Some("backward") => marks.repeat_end = true,
                            _ => {}
                        }
                    }
                    if let Some(ending) = child(el, "ending") {
                        if ending.attribute("type") == Some("start") {
                            marks.ending = ending
                                .attribute("number")
                                .and_then(|n| n.split([',', ' ']).next())
                                .and_then(|n| n.trim().parse().ok());
                        }
                    }
                }
                "note" => {
                    if child(el, "grace").is_some() || child(el, "cue").is_some() {
                        self.warnings.ignored.insert("grace/cue notes".into());
                        continue;
                    }
                    let divs = parse_num::<i64>(el, "duration").unwrap_or(0);
                    let is_chord = child(el, "chord").is_some();
                    let is_rest = child(el, "rest").is_some();
                    let voice = self.voice_id(child_text(el, "voice"));
                    let tie_start =
                        el.children().any(|t| t.has_tag_name("tie") && t.attribute("type") == Some("start"));
                    let tie_end = el.children().any(|t| t.has_tag_name("tie") && t.attribute("type") == Some("stop"));
                    let expressive = child(el, "notations")
                        .is_some_and(|n| n.children().any(|c| c.is_element() && !c.has_tag_name("tied")));
                    if expressive {
                        self.warnings.ignored.insert("notations (articulations, dynamics, ornaments)".into());
                    }
                    if is_chord {
                        let pitch = self.pitch(el)?;
                        let onset = self.whole(last_onset);
                        if let Some(prev) =
                            events.iter_mut().rev().find(|e| e.voice == voice && e.onset == onset && !e.is_rest())
                        {
                            if !prev.pitches.contains(&pitch) {
                                prev.pitches.push(pitch);
                                prev.pitches.sort();
                            }
                            prev.tie_start |= tie_start;
                            prev.tie_end |= tie_end;
                        }
                        continue;
                    }
                    if divs <= 0 {
                        self.warnings
                            .other
                            .push(format!("part {}, measure {index}: zero-duration note skipped", self.id));
                        continue;
                    }
                    let pitches = if is_rest { Vec::new() } else { vec![self.pitch(el)?] };
                    if cursor < 0 {
                        return Err(FormatError::InvalidMusicXml(format!(
                            "part {}, measure {index}: backup before measure start",
                            self.id
                        )));
                    }
                    events.push(NoteEvent {
                        onset: self.whole(cursor),
                        duration: Duration::from_fraction(self.whole(divs))?,
                        pitches,
                        voice,
                        tie_start: tie_start && !is_rest,
                        tie_end: tie_end && !is_rest,
                    });
                    last_onset = cursor;
                    cursor += divs;
                }
                name if IGNORED.contains(&name) => {
                    self.warnings.ignored.insert(name.to_string());
                }
                _ => {}
            }
        }
        Ok(PartMeasure {
            time_signature: self.time_signature,
            key: self.key,
            marks,
            implicit: node.attribute("implicit") == Some("yes"),
            events,
        })
    }
}

/// Parses a partwise document. Parts become voices (a part's extra
/// notational voices get ids like `P1.2`); repeats are expanded and ties
/// merged into sounding events.
pub fn parse_musicxml_detailed(text: &str) -> Result<MusicXmlParse, FormatError> {
    let doc = Document::parse(text).map_err(|e| FormatError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    match root.tag_name().name() {
        "score-partwise" => {}
        "score-timewise" => {
            return Err(FormatError::UnsupportedLayout(
                "timewise MusicXML is not supported; convert to partwise".into(),
            ))
        }
        other => return Err(FormatError::UnsupportedLayout(format!("unexpected root element <{other}>"))),
    }

    let title = child(root, "work")
        .and_then(|w| child_text(w, "work-title"))
        .or_else(|| child_text(root, "movement-title"))
        .unwrap_or("")
        .to_string();
    let composer = child(root, "identification")
        .and_then(|id| id.children().find(|c| c.has_tag_name("creator") && c.attribute("type") == Some("composer")))
        .and_then(|c| c.text())
        .map(str::trim)
        .unwrap_or("")
        .to_string();

    let mut warnings = Warnings::default();
    let mut parts: Vec<Vec<PartMeasure>> = Vec::new();
    let mut voices: Vec<String> = Vec::new();
    for part in root.children().filter(|c| c.has_tag_name("part")) {
        let id = part.attribute("id").unwrap_or("P1").to_string();
        let mut reader = PartReader {
            id,
            divisions: 1,
            time_signature: TimeSignature::default(),
            key: KeySignature::default(),
            primary_voice: None,
            voices: Vec::new(),
            warnings: &mut warnings,
        };
        let measures = part
            .children()
            .filter(|c| c.has_tag_name("measure"))
            .enumerate()
            .map(|(i, m)| reader.measure(m, i))
            .collect::<Result<Vec<_>, _>>()?;
        voices.extend(reader.voices);
        parts.push(measures);
    }
    let count = parts.iter().map(Vec::len).max().unwrap_or(0);
    if count == 0 {
        return Err(FormatError::InvalidMusicXml("document has no measures".into()));
    }
    if voices.is_empty() {
        voices.push(
            root.children()
                .find(|c| c.has_tag_name("part"))
                .and_then(|p| p.attribute("id"))
                .unwrap_or("P1")
                .to_string(),
        );
    }

    let mut notated = Vec::with_capacity(count);
    let mut marks = vec![BarMarks::default(); count];
    for i in 0..count {
        let first = parts.iter().find_map(|p| p.get(i)).expect("some part has measure i");
        let mut measure = Measure::new(i, first.time_signature, first.key);
        let full = measure.time_signature.length();
        let mut extent = Fraction::from_integer(0);
        let mut implicit = false;
        for part in &parts {
            let Some(pm) = part.get(i) else { continue };
            marks[i].merge(pm.marks);
            implicit |= pm.implicit;
            for e in &pm.events {
                extent = extent.max(e.end());
            }
            measure.events.extend(pm.events.iter().cloned());
        }
        if extent > full {
            return Err(FormatError::InvalidMusicXml(format!("measure {i} is longer than its time signature")));
        }
        if extent < full && (implicit || extent > Fraction::from_integer(0)) {
            measure.pickup = Some(extent);
        }
        measure.events.sort_by(|a, b| a.onset.cmp(&b.onset).then_with(|| a.voice.cmp(&b.voice)));
        notated.push(measure);
    }
    let mut measures: Vec<Measure> = unroll_repeats(&marks)
        .into_iter()
        .enumerate()
        .map(|(idx, src)| {
            let mut m = notated[src].clone();
            m.index = idx;
            m
        })
        .collect();
    merge_ties(&mut measures, &voices);

    let score = Score { title, composer, default_unit_length: Duration::new(1, 8)?, measures, voices };
    score.validate()?;
    let mut out: Vec<String> = warnings.ignored.into_iter().map(|w| format!("ignored: {w}")).collect();
    out.extend(warnings.other);
    Ok(MusicXmlParse { score, warnings: out })
}

/// Extracts the root document of a compressed `.mxl` archive.
pub fn read_mxl(bytes: &[u8]) -> Result<String, FormatError> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| FormatError::Archive(e.to_string()))?;
    let mut read_entry = |name: &str| -> Result<String, FormatError> {
        let mut file = archive.by_name(name).map_err(|e| FormatError::Archive(format!("{name}: {e}")))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| FormatError::Archive(format!("{name}: {e}")))?;
        Ok(text)
    };
    let rootfile = match read_entry("META-INF/container.xml") {
        Ok(container) => {
            let doc = Document::parse(&container).map_err(|e| FormatError::XmlSyntax(e.to_string()))?;
            doc.descendants()
                .find(|n| n.has_tag_name("rootfile"))
                .and_then(|n| n.attribute("full-path"))
                .map(str::to_string)
                .ok_or_else(|| FormatError::Archive("container.xml names no rootfile".into()))?
        }
        Err(_) => {
            let names: Vec<String> = archive.file_names().filter_map(|n| n.ok().map(|n| n.into_owned())).collect();
            names
                .into_iter()
                .filter(|n| !n.starts_with("META-INF/") && (n.ends_with(".xml") || n.ends_with(".musicxml")))
                .min()
                .ok_or_else(|| FormatError::Archive("archive holds no MusicXML document".into()))?
        }
    };
    let mut file = archive.by_name(&rootfile).map_err(|e| FormatError::Archive(format!("{rootfile}: {e}")))?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(|e| FormatError::Archive(format!("{rootfile}: {e}")))?;
    Ok(text)
}

pub fn parse_mxl(bytes: &[u8]) -> Result<MusicXmlParse, FormatError> {
    parse_musicxml_detailed(&read_mxl(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::frac;

    fn doc(measures: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<score-partwise version="4.0">
  <work><work-title>Fixture</work-title></work>
  <part-list><score-part id="P1"><part-name>Piano</part-name></score-part></part-list>
  <part id="P1">{measures}</part>
</score-partwise>"#
        )
    }

    const ATTRS: &str = "<attributes><divisions>2</divisions><key><fifths>0</fifths></key><time><beats>4</beats><beat-type>4</beat-type></time></attributes>";

    fn note(step: &str, octave: i32, dur: i32, extra: &str) -> String {
        format!(
            "<note>{extra}<pitch><step>{step}</step><octave>{octave}</octave></pitch><duration>{dur}</duration></note>"
        )
    }

    #[test]
    fn whole_note_c4() {
        let text = doc(&format!(r#"<measure number="1">{ATTRS}{}</measure>"#, note("C", 4, 8, "")));
        let s = parse_musicxml(&text).unwrap();
        assert_eq!(s.title, "Fixture");
        assert_eq!(s.measures.len(), 1);
        assert_eq!(s.measures[0].events.len(), 1);
        assert_eq!(s.measures[0].events[0].midi_pitches(), vec![60]);
        assert_eq!(s.measures[0].events[0].duration.as_fraction(), frac(1, 1));
    }

    #[test]
    fn chord_element_joins_previous_note() {
        let body = format!("{}{}{}", note("C", 4, 4, ""), note("E", 4, 4, "<chord/>"), note("G", 4, 4, ""));
        let s = parse_musicxml(&doc(&format!(r#"<measure number="1">{ATTRS}{body}</measure>"#))).unwrap();
        let ev = &s.measures[0].events;
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].midi_pitches(), vec![60, 64]);
        assert_eq!(ev[1].onset, frac(1, 2));
    }

    #[test]
    fn tie_across_barline_is_one_event() {
        let tie_start = r#"<tie type="start"/>"#;
        let tie_stop = r#"<tie type="stop"/>"#;
        let m1 =
            format!(r#"<measure number="1">{ATTRS}{}{}</measure>"#, note("G", 4, 4, ""), note("C", 5, 4, tie_start));
        let m2 = format!(r#"<measure number="2">{}{}</measure>"#, note("C", 5, 4, tie_stop), note("D", 5, 4, ""));
        let s = parse_musicxml(&doc(&(m1 + &m2))).unwrap();
        assert_eq!(s.measures[0].events[1].duration.as_fraction(), frac(1, 1));
        assert_eq!(s.measures[1].events.len(), 1);
        assert_eq!(s.sounding_events().len(), 3);
    }

    #[test]
    fn backup_creates_second_voice() {
        let voiced = |step: &str, octave: i32, voice: u32| {
            note(step, octave, 8, "").replace("</duration>", &format!("</duration><voice>{voice}</voice>"))
        };
        let body = format!("{}<backup><duration>8</duration></backup>{}", voiced("C", 5, 1), voiced("C", 3, 2));
        let s = parse_musicxml(&doc(&format!(r#"<measure number="1">{ATTRS}{body}</measure>"#))).unwrap();
        assert_eq!(s.voices, vec!["P1".to_string(), "P1.2".to_string()]);
        assert_eq!(s.measures[0].events.len(), 2);
        assert!(s.measures[0].events.iter().all(|e| e.onset == frac(0, 1)));
    }

    #[test]
    fn repeats_are_unrolled() {
        let m1 = format!(
            r#"<measure number="1">{ATTRS}<barline location="left"><repeat direction="forward"/></barline>{}</measure>"#,
            note("C", 4, 8, "")
        );
        let m2 = format!(
            r#"<measure number="2">{}<barline location="right"><repeat direction="backward"/></barline></measure>"#,
            note("D", 4, 8, "")
        );
        let m3 = format!(r#"<measure number="3">{}</measure>"#, note("E", 4, 8, ""));
        let s = parse_musicxml(&doc(&(m1 + &m2 + &m3))).unwrap();
        let firsts: Vec<i32> = s.measures.iter().map(|m| m.events[0].midi_pitches()[0]).collect();
        assert_eq!(firsts, vec![60, 62, 60, 62, 64]);
    }

    #[test]
    fn directions_are_reported() {
        let body = format!(
            "<direction><direction-type><dynamics><f/></dynamics></direction-type></direction>{}",
            note("C", 4, 8, "")
        );
        let parsed = parse_musicxml_detailed(&doc(&format!(r#"<measure number="1">{ATTRS}{body}</measure>"#))).unwrap();
        assert!(parsed.warnings.iter().any(|w| w.contains("direction")));
    }

    #[test]
    fn timewise_rejected() {
        let text = r#"<score-timewise><part-list/><measure number="1"/></score-timewise>"#;
        assert!(matches!(parse_musicxml(text), Err(FormatError::UnsupportedLayout(_))));
        assert!(matches!(parse_musicxml("<score-partwise>"), Err(FormatError::XmlSyntax(_))));
    }
}
