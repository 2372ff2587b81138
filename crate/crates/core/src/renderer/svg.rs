//! Minimal XML well-formedness scanner for SVG validation. Checks tag
//! balance, attribute quoting, and a single root element; it does not
//! resolve entities or namespaces and never rasterizes anything.

/// Returns Ok(()) when the document is well-formed XML with one root
/// element, Err(reason) otherwise.
pub fn check_well_formed(input: &str) -> Result<(), String> {
    let bytes = input.as_bytes();
    let mut pos = skip_bom(bytes);
    let mut stack: Vec<String> = Vec::new();
    let mut roots_closed = 0usize;

    while pos < bytes.len() {
        match bytes[pos] {
            b'<' => {
                if bytes[pos..].starts_with(b"<?") {
                    pos = find(bytes, pos + 2, b"?>")
                        .ok_or("unterminated processing instruction")?
                        + 2;
                } else if bytes[pos..].starts_with(b"<!--") {
                    pos = find(bytes, pos + 4, b"-->").ok_or("unterminated comment")? + 3;
                } else if bytes[pos..].starts_with(b"<![CDATA[") {
                    if stack.is_empty() {
                        return Err("CDATA outside the root element".into());
                    }
                    pos = find(bytes, pos + 9, b"]]>").ok_or("unterminated CDATA section")? + 3;
                } else if bytes[pos..].starts_with(b"<!") {
                    pos = skip_doctype(bytes, pos + 2)?;
                } else if bytes[pos..].starts_with(b"</") {
                    let (name, end) = read_name(bytes, pos + 2)?;
                    let close = skip_spaces(bytes, end);
                    if close >= bytes.len() || bytes[close] != b'>' {
                        return Err(format!("malformed closing tag </{name}"));
                    }
                    match stack.pop() {
                        Some(open) if open == name => {}
                        Some(open) => {
                            return Err(format!("mismatched tag: <{open}> closed by </{name}>"))
                        }
                        None => return Err(format!("closing tag </{name}> with nothing open")),
                    }
                    if stack.is_empty() {
                        roots_closed += 1;
                        if roots_closed > 1 {
                            return Err("more than one root element".into());
                        }
                    }
                    pos = close + 1;
                } else {
                    let (name, after_name) = read_name(bytes, pos + 1)?;
                    if roots_closed > 0 && stack.is_empty() {
                        return Err("element after the root element closed".into());
                    }
                    let (self_closing, end) = read_attributes(bytes, after_name)?;
                    if self_closing {
                        if stack.is_empty() {
                            roots_closed += 1;
                            if roots_closed > 1 {
                                return Err("more than one root element".into());
                            }
                        }
                    } else {
                        stack.push(name);
                    }
                    pos = end;
                }
            }
            b'>' => return Err("stray '>' outside any tag".into()),
            c => {
                if stack.is_empty() && !c.is_ascii_whitespace() {
                    return Err("text content outside the root element".into());
                }
                pos += 1;
            }
        }
    }

    if let Some(open) = stack.last() {
        return Err(format!("unclosed element <{open}>"));
    }
    if roots_closed == 0 {
        return Err("no root element".into());
    }
    Ok(())
}

fn skip_bom(bytes: &[u8]) -> usize {
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        3
    } else {
        0
    }
}

fn find(bytes: &[u8], from: usize, needle: &[u8]) -> Option<usize> {
    (from..bytes.len().saturating_sub(needle.len() - 1))
        .find(|i| &bytes[*i..*i + needle.len()] == needle)
}

fn skip_spaces(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b':') || b >= 0x80
}

fn read_name(bytes: &[u8], pos: usize) -> Result<(String, usize), String> {
    let mut end = pos;
    while end < bytes.len() && is_name_byte(bytes[end]) {
        end += 1;
    }
    if end == pos {
        return Err("empty tag name".into());
    }
    Ok((String::from_utf8_lossy(&bytes[pos..end]).into_owned(), end))
}

/// Scans past attributes; doctype internal subsets are handled separately.
/// Returns (self_closing, position after '>').
fn read_attributes(bytes: &[u8], mut pos: usize) -> Result<(bool, usize), String> {
    loop {
        pos = skip_spaces(bytes, pos);
        if pos >= bytes.len() {
            return Err("unterminated tag".into());
        }
        match bytes[pos] {
            b'>' => return Ok((false, pos + 1)),
            b'/' => {
                if pos + 1 < bytes.len() && bytes[pos + 1] == b'>' {
                    return Ok((true, pos + 2));
                }
                return Err("stray '/' inside tag".into());
            }
            b'"' | b'\'' => {
                let quote = bytes[pos];
                pos += 1;
                while pos < bytes.len() && bytes[pos] != quote {
                    pos += 1;
                }
                if pos >= bytes.len() {
                    return Err("unterminated attribute value".into());
                }
                pos += 1;
            }
            b'<' => return Err("'<' inside tag".into()),
            _ => pos += 1,
        }
    }
}

fn skip_doctype(bytes: &[u8], mut pos: usize) -> Result<usize, String> {
    let mut bracket_depth = 0usize;
    while pos < bytes.len() {
        match bytes[pos] {
            b'[' => bracket_depth += 1,
            b']' => bracket_depth = bracket_depth.saturating_sub(1),
            b'>' if bracket_depth == 0 => return Ok(pos + 1),
            _ => {}
        }
        pos += 1;
    }
    Err("unterminated doctype".into())
}
