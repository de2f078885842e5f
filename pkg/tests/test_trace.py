#! /usr/bin/env python3.9

import pytest
from memshare.errors import MalformedLine, NonMonotonicTimestamp, TraceError
from memshare.segment import AppId
from memshare.trace import DEL, GET, iter_trace, parse_line, parse_trace, SET, TraceRecord, write_trace


def test_parse_line():
    assert parse_line('10,GET,1,foo,56') == TraceRecord(10, GET, AppId(1), 'foo', 56)
    assert parse_line(' 11 , set , 2 , bar , 0 \n') == TraceRecord(11, SET, AppId(2), 'bar', 0)
    assert parse_line('12,del,3,baz,0').op == DEL


@pytest.mark.parametrize('line', ['10,GET,1,foo', '10,GET,1,foo,56,7', '10,PUT,1,foo,5',
                                  'ten,GET,1,foo,5', '10,GET,x,foo,5', '10,GET,1,,5',
                                  '10,GET,1,f o,5', '-1,GET,1,foo,5', '10,GET,1,foo,-5'])
def test_parse_line_rejects(line):
    with pytest.raises(MalformedLine):
        parse_line(line)


def test_malformed_line_carries_line_number():
    with pytest.raises(MalformedLine) as caught:
        list(iter_trace(['# header', '1,GET,1,a,5', '', '2,GET,1']))
    assert caught.value.line_number == 4
    assert str(caught.value).startswith('line 4: ')
    assert isinstance(caught.value, TraceError)
    assert isinstance(caught.value, ValueError)


def test_iter_trace_checks_timestamps():
    lines = ['1,GET,1,a,5', '1,SET,2,a,5', '3,DEL,1,a,0']
    assert [r.timestamp for r in iter_trace(lines)] == [1, 1, 3]
    with pytest.raises(NonMonotonicTimestamp) as caught:
        list(iter_trace(['5,GET,1,a,5', '4,GET,1,a,5']))
    assert caught.value.line_number == 2


def test_write_and_parse_trace(tmp_path):
    records = [TraceRecord(1, GET, AppId(1), 'a', 10), TraceRecord(2, SET, AppId(2), 'b', 20),
               TraceRecord(2, DEL, AppId(2), 'b', 0)]
    path = tmp_path / 'trace.csv'
    assert write_trace(records, path) == 3
    assert path.read_text().splitlines()[0].startswith('#')
    assert list(parse_trace(path)) == records


def test_parse_trace_missing_file(tmp_path):
    with pytest.raises(OSError):
        list(parse_trace(tmp_path / 'missing.csv'))
