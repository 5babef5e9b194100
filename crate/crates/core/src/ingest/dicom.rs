//! Minimal DICOM Part 10 reader for uncompressed explicit-VR little-endian CT slices,
//! plus the matching encoder used by the synthetic data generator.

use super::{IngestError, RawSlice};

pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const PREAMBLE: usize = 128;

type Tag = (u16, u16);

const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const PATIENT_ID: Tag = (0x0010, 0x0020);
const SERIES_UID: Tag = (0x0020, 0x000E);
const INSTANCE_NUMBER: Tag = (0x0020, 0x0013);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const PHOTOMETRIC: Tag = (0x0028, 0x0004);
const NUMBER_OF_FRAMES: Tag = (0x0028, 0x0008);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const PIXEL_SPACING: Tag = (0x0028, 0x0030);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);
const ITEM: Tag = (0xFFFE, 0xE000);
const ITEM_END: Tag = (0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = (0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

/// Human-readable element name used in error messages.
pub fn tag_name(tag: Tag) -> String {
    let keyword = match tag {
        TRANSFER_SYNTAX => "TransferSyntaxUID",
        PATIENT_ID => "PatientID",
        SERIES_UID => "SeriesInstanceUID",
        INSTANCE_NUMBER => "InstanceNumber",
        SAMPLES_PER_PIXEL => "SamplesPerPixel",
        PHOTOMETRIC => "PhotometricInterpretation",
        NUMBER_OF_FRAMES => "NumberOfFrames",
        ROWS => "Rows",
        COLUMNS => "Columns",
        PIXEL_SPACING => "PixelSpacing",
        BITS_ALLOCATED => "BitsAllocated",
        PIXEL_REPRESENTATION => "PixelRepresentation",
        RESCALE_INTERCEPT => "RescaleIntercept",
        RESCALE_SLOPE => "RescaleSlope",
        PIXEL_DATA => "PixelData",
        _ => "",
    };
    if keyword.is_empty() {
        format!("({:04X},{:04X})", tag.0, tag.1)
    } else {
        format!("{keyword} ({:04X},{:04X})", tag.0, tag.1)
    }
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, element: impl FnOnce() -> String) -> Result<&'a [u8], IngestError> {
        if self.remaining() < n {
            return Err(IngestError::Truncated { element: element(), offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, element: impl FnOnce() -> String) -> Result<u16, IngestError> {
        let b = self.take(2, element)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, element: impl FnOnce() -> String) -> Result<u32, IngestError> {
        let b = self.take(4, element)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, IngestError> {
        let g = self.u16(|| "element header".into())?;
        let e = self.u16(|| "element header".into())?;
        Ok((g, e))
    }
}

struct Element<'a> {
    tag: Tag,
    value: &'a [u8],
}

/// Reads the next explicit-VR element. Undefined-length sequences are consumed in
/// place and yield an empty value.
fn read_element<'a>(cur: &mut Cursor<'a>) -> Result<Element<'a>, IngestError> {
    let tag = cur.tag()?;
    let name = || tag_name(tag);
    let vr_bytes = cur.take(2, name)?;
    let vr = [vr_bytes[0], vr_bytes[1]];
    let len = if has_long_length(&vr) {
        cur.take(2, name)?;
        cur.u32(name)?
    } else {
        cur.u16(name)? as u32
    };
    if len == UNDEFINED {
        if tag == PIXEL_DATA {
            return Err(IngestError::UnsupportedTransferSyntax("encapsulated PixelData".into()));
        }
        skip_undefined_sequence(cur)?;
        return Ok(Element { tag, value: &[] });
    }
    let value = cur.take(len as usize, name)?;
    Ok(Element { tag, value })
}

fn skip_undefined_sequence(cur: &mut Cursor<'_>) -> Result<(), IngestError> {
    loop {
        let tag = cur.tag()?;
        let len = cur.u32(|| tag_name(tag))?;
        match tag {
            SEQUENCE_END => return Ok(()),
            ITEM if len == UNDEFINED => loop {
                if cur.remaining() >= 4 {
                    let peek = (
                        u16::from_le_bytes([cur.bytes[cur.pos], cur.bytes[cur.pos + 1]]),
                        u16::from_le_bytes([cur.bytes[cur.pos + 2], cur.bytes[cur.pos + 3]]),
                    );
                    if peek == ITEM_END {
                        cur.tag()?;
                        cur.u32(|| tag_name(ITEM_END))?;
                        break;
                    }
                }
                read_element(cur)?;
            },
            ITEM => {
                cur.take(len as usize, || tag_name(ITEM))?;
            }
            other => {
                return Err(IngestError::Malformed(format!("unexpected {} inside sequence", tag_name(other))));
            }
        }
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value).trim_matches(|c: char| c == ' ' || c == '\0').to_string()
}

fn us(tag: Tag, value: &[u8]) -> Result<u16, IngestError> {
    if value.len() < 2 {
        return Err(IngestError::InvalidValue { element: tag_name(tag), value: format!("{value:?}") });
    }
    Ok(u16::from_le_bytes([value[0], value[1]]))
}

fn decimals(tag: Tag, value: &[u8]) -> Result<Vec<f64>, IngestError> {
    text(value)
        .split('\\')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::InvalidValue { element: tag_name(tag), value: text(value) })
        })
        .collect()
}

#[derive(Default)]
struct Collected {
    transfer_syntax: Option<String>,
    patient_id: Option<String>,
    series_id: Option<String>,
    instance_number: Option<i64>,
    samples_per_pixel: Option<u16>,
    photometric: Option<String>,
    frames: Option<i64>,
    rows: Option<u16>,
    cols: Option<u16>,
    spacing: Option<(f64, f64)>,
    bits_allocated: Option<u16>,
    pixel_representation: Option<u16>,
    intercept: Option<f64>,
    slope: Option<f64>,
    pixel_data: Option<(usize, usize)>,
}

/// Parses one uncompressed, explicit-VR little-endian CT slice.
pub fn parse_dicom(bytes: &[u8]) -> Result<RawSlice, IngestError> {
    if bytes.len() < PREAMBLE + 4 || &bytes[PREAMBLE..PREAMBLE + 4] != b"DICM" {
        return Err(IngestError::NotDicom);
    }
    let mut cur = Cursor { bytes, pos: PREAMBLE + 4 };
    let mut c = Collected::default();
    let mut meta_done = false;
    while cur.remaining() > 0 {
        let el = read_element(&mut cur)?;
        if el.tag.0 != 0x0002 && !meta_done {
            meta_done = true;
            match c.transfer_syntax.as_deref() {
                Some(EXPLICIT_VR_LE) => {}
                Some(other) => return Err(IngestError::UnsupportedTransferSyntax(other.to_string())),
                None => return Err(IngestError::MissingElement(tag_name(TRANSFER_SYNTAX))),
            }
        }
        let v = el.value;
        match el.tag {
            TRANSFER_SYNTAX => c.transfer_syntax = Some(text(v)),
            PATIENT_ID => c.patient_id = Some(text(v)),
            SERIES_UID => c.series_id = Some(text(v)),
            INSTANCE_NUMBER => c.instance_number = decimals(el.tag, v)?.first().map(|&x| x as i64),
            SAMPLES_PER_PIXEL => c.samples_per_pixel = Some(us(el.tag, v)?),
            PHOTOMETRIC => c.photometric = Some(text(v)),
            NUMBER_OF_FRAMES => c.frames = decimals(el.tag, v)?.first().map(|&x| x as i64),
            ROWS => c.rows = Some(us(el.tag, v)?),
            COLUMNS => c.cols = Some(us(el.tag, v)?),
            PIXEL_SPACING => {
                let d = decimals(el.tag, v)?;
                if d.len() != 2 || d.iter().any(|&x| x <= 0.0) {
                    return Err(IngestError::InvalidValue { element: tag_name(el.tag), value: text(v) });
                }
                c.spacing = Some((d[0], d[1]));
            }
            BITS_ALLOCATED => c.bits_allocated = Some(us(el.tag, v)?),
            PIXEL_REPRESENTATION => c.pixel_representation = Some(us(el.tag, v)?),
            RESCALE_INTERCEPT => c.intercept = decimals(el.tag, v)?.first().copied(),
            RESCALE_SLOPE => c.slope = decimals(el.tag, v)?.first().copied(),
            PIXEL_DATA => c.pixel_data = Some((cur.pos - v.len(), v.len())),
            _ => {}
        }
    }
    if !meta_done {
        // A file holding only the meta group has no dataset at all.
        return Err(IngestError::MissingElement(tag_name(PIXEL_DATA)));
    }
    assemble(bytes, c)
}

fn assemble(bytes: &[u8], c: Collected) -> Result<RawSlice, IngestError> {
    let rows = c.rows.ok_or_else(|| IngestError::MissingElement(tag_name(ROWS)))? as usize;
    let cols = c.cols.ok_or_else(|| IngestError::MissingElement(tag_name(COLUMNS)))? as usize;
    let (px_off, px_len) = c.pixel_data.ok_or_else(|| IngestError::MissingElement(tag_name(PIXEL_DATA)))?;
    if rows == 0 || cols == 0 {
        return Err(IngestError::InvalidValue { element: "Rows/Columns".into(), value: format!("{rows}x{cols}") });
    }
    if let Some(p) = &c.photometric {
        if p == "MONOCHROME1" {
            return Err(IngestError::Unsupported(
                "PhotometricInterpretation MONOCHROME1 (inverted grayscale) is not accepted".into(),
            ));
        }
        if p != "MONOCHROME2" {
            return Err(IngestError::Unsupported(format!("PhotometricInterpretation {p}")));
        }
    }
    if c.samples_per_pixel.is_some_and(|s| s != 1) {
        return Err(IngestError::Unsupported(format!("SamplesPerPixel {}", c.samples_per_pixel.unwrap())));
    }
    if c.frames.is_some_and(|f| f > 1) {
        return Err(IngestError::Unsupported(format!("multi-frame image ({} frames)", c.frames.unwrap())));
    }
    let bits = c.bits_allocated.unwrap_or(16);
    let signed = c.pixel_representation.unwrap_or(0) == 1;
    let bytes_per = match bits {
        8 => 1,
        16 => 2,
        other => return Err(IngestError::Unsupported(format!("BitsAllocated {other}"))),
    };
    let need = rows * cols * bytes_per;
    if px_len < need {
        return Err(IngestError::PixelDataLength { expected: need, found: px_len });
    }
    let raw = &bytes[px_off..px_off + need];
    let stored: Vec<i32> = match (bytes_per, signed) {
        (1, false) => raw.iter().map(|&b| b as i32).collect(),
        (1, true) => raw.iter().map(|&b| b as i8 as i32).collect(),
        (_, false) => raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as i32).collect(),
        (_, true) => raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as i32).collect(),
    };

    let mut warnings = Vec::new();
    let slope = match c.slope {
        Some(s) if s > 0.0 => s,
        Some(s) => {
            return Err(IngestError::InvalidValue { element: tag_name(RESCALE_SLOPE), value: s.to_string() });
        }
        None => {
            warnings.push("RescaleSlope missing, using 1.0".to_string());
            1.0
        }
    };
    let intercept = c.intercept.unwrap_or_else(|| {
        warnings.push("RescaleIntercept missing, using 0.0".to_string());
        0.0
    });
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RawSlice {
        rows,
        cols,
        stored,
        rescale_slope: slope,
        rescale_intercept: intercept,
        pixel_spacing: c.spacing,
        patient_id: c.patient_id.unwrap_or_default(),
        series_id: c.series_id.unwrap_or_default(),
        instance_number: c.instance_number.unwrap_or(0),
        warnings,
    })
}

fn push_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    let mut value = value.to_vec();
    if value.len() % 2 == 1 {
        value.push(if matches!(vr, b"UI" | b"OB") { 0 } else { b' ' });
    }
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if has_long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(&value);
}

/// Encodes a slice as a signed 16-bit MONOCHROME2 explicit-VR little-endian file.
/// Stored values must fit in `i16`.
pub fn encode_dicom(slice: &RawSlice) -> Vec<u8> {
    let mut out = vec![0u8; PREAMBLE];
    out.extend_from_slice(b"DICM");
    let mut meta = Vec::new();
    push_element(&mut meta, (0x0002, 0x0001), b"OB", &[0, 1]);
    push_element(&mut meta, TRANSFER_SYNTAX, b"UI", EXPLICIT_VR_LE.as_bytes());
    push_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    push_element(&mut out, PATIENT_ID, b"LO", slice.patient_id.as_bytes());
    push_element(&mut out, SERIES_UID, b"UI", slice.series_id.as_bytes());
    push_element(&mut out, INSTANCE_NUMBER, b"IS", slice.instance_number.to_string().as_bytes());
    push_element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
    push_element(&mut out, PHOTOMETRIC, b"CS", b"MONOCHROME2");
    push_element(&mut out, ROWS, b"US", &(slice.rows as u16).to_le_bytes());
    push_element(&mut out, COLUMNS, b"US", &(slice.cols as u16).to_le_bytes());
    if let Some((r, c)) = slice.pixel_spacing {
        push_element(&mut out, PIXEL_SPACING, b"DS", format!("{r}\\{c}").as_bytes());
    }
    push_element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    push_element(&mut out, PIXEL_REPRESENTATION, b"US", &1u16.to_le_bytes());
    push_element(&mut out, RESCALE_INTERCEPT, b"DS", slice.rescale_intercept.to_string().as_bytes());
    push_element(&mut out, RESCALE_SLOPE, b"DS", slice.rescale_slope.to_string().as_bytes());
    let px: Vec<u8> = slice.stored.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect();
    push_element(&mut out, PIXEL_DATA, b"OW", &px);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawSlice {
        RawSlice {
            rows: 2,
            cols: 3,
            stored: vec![-1024, 0, 5, 100, 2000, -3],
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            pixel_spacing: Some((0.75, 0.8)),
            patient_id: "P001".into(),
            series_id: "1.2.3".into(),
            instance_number: 17,
            warnings: vec![],
        }
    }

    #[test]
    fn encoder_round_trip() {
        let s = sample();
        assert_eq!(parse_dicom(&encode_dicom(&s)).unwrap(), s);
    }

    #[test]
    fn rejects_non_dicom() {
        assert!(matches!(parse_dicom(b"hello"), Err(IngestError::NotDicom)));
    }

    #[test]
    fn truncation_names_pixel_data() {
        let bytes = encode_dicom(&sample());
        let err = parse_dicom(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            IngestError::Truncated { element, .. } => assert!(element.starts_with("PixelData"), "{element}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
